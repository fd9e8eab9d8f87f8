//! Execution of enemy and victim kernels, plus instrumented dry runs that
//! replay the same address streams for inspection. All stressor and victim
//! traffic goes through volatile accesses with runtime-random values so the
//! optimizer cannot elide the loops.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BusEnemyParams, CacheEnemyParams, EnemyParams, MemOp, MemoryEnemyParams, OpSequence, ResourceKind, VictimConfig};
use crate::error::{Error, Result};

/// How many accesses an enemy performs between checks of its stop flag.
const STOP_CHECK_MASK: u64 = 0xFFF;

#[inline(always)]
unsafe fn vread<T: Copy>(p: *const T) -> T {
    std::ptr::read_volatile(p)
}

#[inline(always)]
unsafe fn vwrite<T: Copy>(p: *mut T, v: T) {
    std::ptr::write_volatile(p, v)
}

fn alloc_bytes(len: u64) -> Result<Vec<u8>> {
    let len = usize::try_from(len).map_err(|_| Error::Environment(format!("buffer of {len} bytes exceeds the address space")))?;
    let mut v: Vec<u8> = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|_| Error::Environment(format!("failed to allocate a {len} byte buffer")))?;
    v.resize(len, 0);
    Ok(v)
}

fn alloc_elems<T: Clone + Default>(count: u64) -> Result<Vec<T>> {
    let count = usize::try_from(count).map_err(|_| Error::Environment(format!("{count} elements exceed the address space")))?;
    let mut v: Vec<T> = Vec::new();
    v.try_reserve_exact(count)
        .map_err(|_| Error::Environment(format!("failed to allocate a {count} element buffer")))?;
    v.resize(count, T::default());
    Ok(v)
}

/// One cache-enemy sweep: offsets 0, stride, 2*stride, ... below the buffer
/// size, applying the full op sequence at each. The callback returns false
/// to abort the sweep.
fn cache_sweep(buffer_size: u64, stride: u64, ops: &OpSequence, mut access: impl FnMut(u64, MemOp) -> bool) {
    let mut off = 0;
    while off < buffer_size {
        for &op in ops.ops() {
            if !access(off, op) {
                return;
            }
        }
        off += stride;
    }
}

/// One bus-enemy pass over `elements` elements: load from the source buffer,
/// store to the destination. Buffer ids are 0 and 1; swapping roles swaps
/// which one is read.
fn bus_pass(elements: u64, swap_roles: bool, mut access: impl FnMut(u8, u64, MemOp) -> bool) {
    let (src, dst) = if swap_roles { (1, 0) } else { (0, 1) };
    for i in 0..elements {
        if !access(src, i, MemOp::Load) || !access(dst, i, MemOp::Store) {
            return;
        }
    }
}

/// Start offset of one memory-enemy region fill.
fn pick_region<R: Rng + ?Sized>(buffer_size: u64, subregion_size: u64, rng: &mut R) -> u64 {
    rng.random_range(0..=buffer_size - subregion_size)
}

fn check_cache_params(p: &CacheEnemyParams) -> Result<()> {
    if p.buffer_size == 0 || p.stride == 0 || p.ops.is_empty() {
        return Err(Error::Config("cache enemy needs a non-empty buffer, a positive stride and at least one op".into()));
    }
    Ok(())
}

fn check_bus_params(p: &BusEnemyParams) -> Result<()> {
    if p.buffer_size == 0 {
        return Err(Error::Config("bus enemy needs a non-empty buffer".into()));
    }
    if p.element_width != 1 && p.element_width != 2 {
        return Err(Error::Config(format!("bus element width must be 1 or 2 bytes, got {}", p.element_width)));
    }
    Ok(())
}

fn check_memory_params(p: &MemoryEnemyParams) -> Result<()> {
    if p.subregion_size == 0 || p.buffer_size == 0 {
        return Err(Error::Config("memory enemy needs non-empty buffer and subregion".into()));
    }
    if p.subregion_size > p.buffer_size {
        return Err(Error::Config(format!(
            "memory enemy subregion of {} bytes exceeds its {} byte buffer",
            p.subregion_size, p.buffer_size
        )));
    }
    Ok(())
}

/// Run an enemy until `stop` becomes true. `ready` is invoked once, after
/// all buffers are allocated and immediately before the stress loop starts.
/// Returns promptly after `stop` is observed.
pub fn run_enemy(params: &EnemyParams, stop: &AtomicBool, ready: impl FnOnce()) -> Result<()> {
    match params {
        EnemyParams::Cache(p) => cache_enemy(p, stop, ready),
        EnemyParams::Bus(p) => bus_enemy(p, stop, ready),
        EnemyParams::Memory(p) => memory_enemy(p, stop, ready),
    }
}

fn cache_enemy(p: &CacheEnemyParams, stop: &AtomicBool, ready: impl FnOnce()) -> Result<()> {
    check_cache_params(p)?;
    let mut buf = alloc_bytes(p.buffer_size)?;
    let base = buf.as_mut_ptr();
    let mut value: u8 = rand::rng().random();
    ready();
    let mut count: u64 = 0;
    let mut stopped = false;
    while !stopped && !stop.load(Ordering::Relaxed) {
        cache_sweep(p.buffer_size, p.stride, &p.ops, |off, op| {
            unsafe {
                let slot = base.add(off as usize);
                match op {
                    MemOp::Load => value = value.wrapping_add(vread(slot)),
                    MemOp::Store => vwrite(slot, value),
                }
            }
            value = value.wrapping_add(1);
            count += 1;
            if count & STOP_CHECK_MASK == 0 && stop.load(Ordering::Relaxed) {
                stopped = true;
                return false;
            }
            true
        });
    }
    Ok(())
}

trait BusElem: Copy + Default {
    fn widen(v: u8) -> Self;
    fn mix(self, other: Self) -> Self;
}

impl BusElem for u8 {
    fn widen(v: u8) -> Self {
        v
    }
    fn mix(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
}

impl BusElem for u16 {
    fn widen(v: u8) -> Self {
        v as u16
    }
    fn mix(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
}

fn bus_enemy(p: &BusEnemyParams, stop: &AtomicBool, ready: impl FnOnce()) -> Result<()> {
    check_bus_params(p)?;
    match p.element_width {
        1 => bus_enemy_typed::<u8>(p, stop, ready),
        _ => bus_enemy_typed::<u16>(p, stop, ready),
    }
}

fn bus_enemy_typed<T: BusElem>(p: &BusEnemyParams, stop: &AtomicBool, ready: impl FnOnce()) -> Result<()> {
    let elements = (p.buffer_size / p.element_width).max(1);
    let mut a: Vec<T> = alloc_elems(elements)?;
    let mut b: Vec<T> = alloc_elems(elements)?;
    let bufs: [*mut T; 2] = [a.as_mut_ptr(), b.as_mut_ptr()];
    let inc = T::widen(rand::rng().random());
    ready();
    let mut carry = T::default();
    let mut count: u64 = 0;
    let mut stopped = false;
    while !stopped && !stop.load(Ordering::Relaxed) {
        bus_pass(elements, p.swap_roles, |buffer, i, op| {
            unsafe {
                let slot = bufs[buffer as usize].add(i as usize);
                match op {
                    MemOp::Load => carry = vread(slot).mix(inc),
                    MemOp::Store => vwrite(slot, carry),
                }
            }
            count += 1;
            if count & STOP_CHECK_MASK == 0 && stop.load(Ordering::Relaxed) {
                stopped = true;
                return false;
            }
            true
        });
    }
    Ok(())
}

fn memory_enemy(p: &MemoryEnemyParams, stop: &AtomicBool, ready: impl FnOnce()) -> Result<()> {
    check_memory_params(p)?;
    let mut buf = alloc_bytes(p.buffer_size)?;
    let base = buf.as_mut_ptr();
    let mut rng = rand::rng();
    ready();
    while !stop.load(Ordering::Relaxed) {
        let start = pick_region(p.buffer_size, p.subregion_size, &mut rng);
        let byte: u8 = rng.random();
        unsafe { volatile_fill(base.add(start as usize), p.subregion_size as usize, byte) };
    }
    Ok(())
}

/// Volatile memset: word-sized stores where alignment allows, byte stores at
/// the edges.
unsafe fn volatile_fill(base: *mut u8, len: usize, byte: u8) {
    let word = u64::from_ne_bytes([byte; 8]);
    let end = base.add(len);
    let mut p = base;
    while (p as usize) % 8 != 0 && p < end {
        vwrite(p, byte);
        p = p.add(1);
    }
    while p.add(8) <= end {
        vwrite(p as *mut u64, word);
        p = p.add(8);
    }
    while p < end {
        vwrite(p, byte);
        p = p.add(1);
    }
}

/// Run a victim to completion and return the wall-clock duration of its
/// access loop in nanoseconds. Buffer set-up happens before the clock
/// starts.
pub fn run_victim(config: &VictimConfig) -> Result<u64> {
    config.validate()?;
    match config.resource {
        ResourceKind::Cache => cache_victim(config),
        ResourceKind::Bus => bus_victim(config),
        ResourceKind::Memory => memory_victim(config),
    }
}

/// Read-modify-write one line per cache set, then move to the next way, so
/// every set sees the same pressure.
fn cache_victim(config: &VictimConfig) -> Result<u64> {
    let sets = config.llc_size / (config.line_size * config.associativity);
    let way_bytes = sets * config.line_size;
    let mut buf = alloc_bytes(config.llc_size)?;
    let base = buf.as_mut_ptr();
    let mut value: u8 = rand::rng().random();
    let start = Instant::now();
    for _ in 0..config.work_units {
        for way in 0..config.associativity {
            for set in 0..sets {
                unsafe {
                    let slot = base.add((way * way_bytes + set * config.line_size) as usize);
                    let v = vread(slot);
                    vwrite(slot, v.wrapping_add(value));
                }
            }
        }
        value = value.wrapping_add(1);
    }
    Ok(start.elapsed().as_nanos() as u64)
}

/// Element-wise copy between two buffers larger than the LLC.
fn bus_victim(config: &VictimConfig) -> Result<u64> {
    let elements = (config.buffer_size / 4).max(1);
    let mut a: Vec<u32> = alloc_elems(elements)?;
    let mut b: Vec<u32> = alloc_elems(elements)?;
    let src = a.as_mut_ptr();
    let dst = b.as_mut_ptr();
    let inc: u32 = rand::rng().random();
    let start = Instant::now();
    for _ in 0..config.work_units {
        for i in 0..elements as usize {
            unsafe {
                let v = vread(src.add(i));
                vwrite(dst.add(i), v.wrapping_add(inc));
            }
        }
    }
    Ok(start.elapsed().as_nanos() as u64)
}

/// Sequential stores of pseudorandom words over a buffer larger than the
/// LLC.
fn memory_victim(config: &VictimConfig) -> Result<u64> {
    let words = (config.buffer_size / 8).max(1);
    let mut buf: Vec<u64> = alloc_elems(words)?;
    let base = buf.as_mut_ptr();
    let mut state: u64 = rand::rng().random::<u64>() | 1;
    let start = Instant::now();
    for _ in 0..config.work_units {
        for i in 0..words as usize {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            unsafe { vwrite(base.add(i), state) };
        }
    }
    Ok(start.elapsed().as_nanos() as u64)
}

/// One event of an instrumented dry run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    /// A single access at a byte offset of the numbered buffer.
    Access { buffer: u8, offset: u64, op: MemOp },
    /// A contiguous fill of [start, start + len).
    Region { start: u64, len: u64 },
}

/// Replay the address stream an enemy would generate without touching any
/// memory. `iterations` counts sweeps (cache), passes (bus) or region fills
/// (memory); `seed` drives the memory enemy's region picks. Only for
/// inspection and tests, never active during measurement.
pub fn enemy_trace(params: &EnemyParams, iterations: u64, seed: u64) -> Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    match params {
        EnemyParams::Cache(p) => {
            check_cache_params(p)?;
            for _ in 0..iterations {
                cache_sweep(p.buffer_size, p.stride, &p.ops, |offset, op| {
                    events.push(TraceEvent::Access { buffer: 0, offset, op });
                    true
                });
            }
        }
        EnemyParams::Bus(p) => {
            check_bus_params(p)?;
            let elements = (p.buffer_size / p.element_width).max(1);
            for _ in 0..iterations {
                bus_pass(elements, p.swap_roles, |buffer, i, op| {
                    events.push(TraceEvent::Access { buffer, offset: i * p.element_width, op });
                    true
                });
            }
        }
        EnemyParams::Memory(p) => {
            check_memory_params(p)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..iterations {
                let start = pick_region(p.buffer_size, p.subregion_size, &mut rng);
                let byte: u8 = rng.random();
                let _ = byte;
                events.push(TraceEvent::Region { start, len: p.subregion_size });
            }
        }
    }
    Ok(events)
}
