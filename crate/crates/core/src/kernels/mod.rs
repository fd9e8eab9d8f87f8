//! Enemy and victim kernels: the parameterised access patterns that stress a
//! shared resource, the victim loops whose slowdown measures that stress,
//! and the parameter spaces the tuner searches.

pub mod exec;
pub mod space;

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use exec::{enemy_trace, run_enemy, run_victim, TraceEvent};
pub use space::{enemy_parameter_space, DimKind, Dimension, DimValue, ParameterSpace, Point, Scale};

/// A shared hardware resource an enemy process targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Cache,
    Bus,
    Memory,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 3] = [ResourceKind::Cache, ResourceKind::Bus, ResourceKind::Memory];

    /// Single-letter code used in environment labels.
    pub fn letter(self) -> char {
        match self {
            ResourceKind::Cache => 'C',
            ResourceKind::Bus => 'B',
            ResourceKind::Memory => 'M',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'C' => Some(ResourceKind::Cache),
            'B' => Some(ResourceKind::Bus),
            'M' => Some(ResourceKind::Memory),
            _ => None,
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResourceKind::Cache => "cache",
            ResourceKind::Bus => "bus",
            ResourceKind::Memory => "memory",
        };
        f.write_str(s)
    }
}

impl FromStr for ResourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cache" => Ok(ResourceKind::Cache),
            "bus" => Ok(ResourceKind::Bus),
            "memory" => Ok(ResourceKind::Memory),
            other => Err(Error::Config(format!("unknown resource {other:?}"))),
        }
    }
}

/// A single memory operation in an access sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemOp {
    Load,
    Store,
}

impl MemOp {
    pub fn letter(self) -> char {
        match self {
            MemOp::Load => 'L',
            MemOp::Store => 'S',
        }
    }
}

/// Sequence of loads and stores applied at each visited address, written as
/// a string of S and L characters ("SLSSL").
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OpSequence(Vec<MemOp>);

impl OpSequence {
    pub fn new(ops: Vec<MemOp>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Config("op sequence must not be empty".into()));
        }
        Ok(OpSequence(ops))
    }

    pub fn ops(&self) -> &[MemOp] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn stores(&self) -> usize {
        self.0.iter().filter(|op| matches!(op, MemOp::Store)).count()
    }

    pub fn loads(&self) -> usize {
        self.0.iter().filter(|op| matches!(op, MemOp::Load)).count()
    }
}

impl fmt::Display for OpSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.0 {
            write!(f, "{}", op.letter())?;
        }
        Ok(())
    }
}

impl FromStr for OpSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ops = s
            .chars()
            .map(|c| match c {
                'S' => Ok(MemOp::Store),
                'L' => Ok(MemOp::Load),
                other => Err(Error::Config(format!("op sequence may only contain S and L, got {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        OpSequence::new(ops)
    }
}

impl Serialize for OpSequence {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OpSequence {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|e| D::Error::custom(format!("{e}")))
    }
}

/// Cache enemy: strides over a buffer applying the op sequence at each
/// visited address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheEnemyParams {
    pub buffer_size: u64,
    pub stride: u64,
    pub ops: OpSequence,
}

/// Bus enemy: element-wise copy between two buffers, optionally with source
/// and destination roles swapped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BusEnemyParams {
    pub buffer_size: u64,
    /// Element width in bytes (1 or 2).
    pub element_width: u64,
    pub swap_roles: bool,
}

/// Memory enemy: fills randomly placed subregions of a large buffer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryEnemyParams {
    pub buffer_size: u64,
    pub subregion_size: u64,
}

/// Parameters for one enemy process, tagged by the resource it stresses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "resource", rename_all = "lowercase")]
pub enum EnemyParams {
    Cache(CacheEnemyParams),
    Bus(BusEnemyParams),
    Memory(MemoryEnemyParams),
}

impl EnemyParams {
    pub fn resource(&self) -> ResourceKind {
        match self {
            EnemyParams::Cache(_) => ResourceKind::Cache,
            EnemyParams::Bus(_) => ResourceKind::Bus,
            EnemyParams::Memory(_) => ResourceKind::Memory,
        }
    }
}

/// A broken constraint found by [`validate_params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub dimension: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.dimension, self.message)
    }
}

fn check_range(violations: &mut Vec<Violation>, space: &ParameterSpace, name: &str, value: u64) {
    if let Some((lo, hi)) = space.integer_bounds(name) {
        if value < lo || value > hi {
            violations.push(Violation {
                dimension: name.to_string(),
                message: format!("{value} outside [{lo}, {hi}]"),
            });
        }
    }
}

/// Check `params` against the structural rules of its enemy kind and the
/// bounds of `space`. Returns every violation found; an empty list means the
/// parameters are valid.
pub fn validate_params(params: &EnemyParams, space: &ParameterSpace) -> Vec<Violation> {
    let mut violations = Vec::new();
    if params.resource() != space.resource {
        violations.push(Violation {
            dimension: "resource".into(),
            message: format!("{} parameters checked against a {} space", params.resource(), space.resource),
        });
        return violations;
    }
    match params {
        EnemyParams::Cache(p) => {
            if p.stride == 0 {
                violations.push(Violation { dimension: "stride".into(), message: "must be at least 1".into() });
            }
            if p.ops.is_empty() || p.ops.len() > space::MAX_OPS {
                violations.push(Violation {
                    dimension: "ops".into(),
                    message: format!("sequence length must be in [1, {}]", space::MAX_OPS),
                });
            }
            check_range(&mut violations, space, "buffer_size", p.buffer_size);
            check_range(&mut violations, space, "stride", p.stride);
        }
        EnemyParams::Bus(p) => {
            if !(p.element_width == 1 || p.element_width == 2) {
                violations.push(Violation {
                    dimension: "element_width".into(),
                    message: format!("must be 1 or 2 bytes, got {}", p.element_width),
                });
            }
            check_range(&mut violations, space, "buffer_size", p.buffer_size);
        }
        EnemyParams::Memory(p) => {
            if p.subregion_size == 0 {
                violations.push(Violation { dimension: "subregion_size".into(), message: "must be at least 1".into() });
            }
            if p.subregion_size > p.buffer_size {
                violations.push(Violation {
                    dimension: "subregion_size".into(),
                    message: format!("{} exceeds buffer_size {}", p.subregion_size, p.buffer_size),
                });
            }
            check_range(&mut violations, space, "buffer_size", p.buffer_size);
            check_range(&mut violations, space, "subregion_size", p.subregion_size);
        }
    }
    violations
}

/// Configuration for one victim run: the probe workload whose slowdown under
/// contention scores an enemy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub resource: ResourceKind,
    pub llc_size: u64,
    pub line_size: u64,
    pub associativity: u64,
    /// Working-set size for the bus and memory victims; the cache victim
    /// always walks exactly one LLC worth of lines.
    pub buffer_size: u64,
    /// Number of passes over the working set.
    pub work_units: u64,
}

impl VictimConfig {
    /// Victim for `resource` with the conventional working-set choice: the
    /// cache victim covers the LLC, the bus and memory victims use four
    /// times the LLC so they always miss.
    pub fn for_resource(
        resource: ResourceKind,
        llc_size: u64,
        line_size: u64,
        associativity: u64,
        work_units: u64,
    ) -> Self {
        let buffer_size = match resource {
            ResourceKind::Cache => llc_size,
            ResourceKind::Bus | ResourceKind::Memory => 4 * llc_size,
        };
        VictimConfig { resource, llc_size, line_size, associativity, buffer_size, work_units }
    }

    pub fn validate(&self) -> Result<()> {
        if self.llc_size == 0 || self.line_size == 0 || self.associativity == 0 {
            return Err(Error::Config("victim cache geometry must be positive".into()));
        }
        if self.line_size * self.associativity > self.llc_size {
            return Err(Error::Config(format!(
                "LLC of {} bytes cannot hold {} ways of {} byte lines",
                self.llc_size, self.associativity, self.line_size
            )));
        }
        match self.resource {
            ResourceKind::Cache => {}
            ResourceKind::Bus | ResourceKind::Memory => {
                if self.buffer_size <= self.llc_size {
                    return Err(Error::Config(format!(
                        "{} victim needs a working set larger than the LLC ({} <= {})",
                        self.resource, self.buffer_size, self.llc_size
                    )));
                }
            }
        }
        Ok(())
    }
}
