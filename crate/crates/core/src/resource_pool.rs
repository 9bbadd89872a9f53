//! Simulated device pool, placement groups, and role-to-device binding.
//!
//! Memory is tracked in abstract integer units. Every device keeps a ledger
//! of reservations so that `free + reserved == capacity` holds exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::role::Role;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Gpu,
    Cpu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub kind: DeviceKind,
    pub memory_capacity: u64,
}

impl DeviceSpec {
    pub fn gpu(id: impl Into<String>, memory_capacity: u64) -> Self {
        Self { id: id.into(), kind: DeviceKind::Gpu, memory_capacity }
    }

    pub fn cpu(id: impl Into<String>, memory_capacity: u64) -> Self {
        Self { id: id.into(), kind: DeviceKind::Cpu, memory_capacity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub device_id: String,
    pub memory_reserved: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementGroup {
    pub group_id: GroupId,
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationRequest {
    pub device_ids: Vec<String>,
    pub memory_per_slot: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("allocation error on device `{device}`: requested {requested}, free {free}")]
    Allocation { device: String, requested: u64, free: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourcePool {
    devices: Vec<DeviceSpec>,
    index: HashMap<String, usize>,
    reserved: Vec<u64>,
    groups: BTreeMap<GroupId, PlacementGroup>,
    next_group: u64,
}

impl ResourcePool {
    pub fn create(specs: Vec<DeviceSpec>) -> Result<Self, PoolError> {
        if specs.is_empty() {
            return Err(PoolError::Config("device pool is empty".into()));
        }
        let mut index = HashMap::new();
        for (i, spec) in specs.iter().enumerate() {
            if spec.id.is_empty() {
                return Err(PoolError::Config(format!("device #{i} has an empty id")));
            }
            if spec.kind == DeviceKind::Gpu && spec.memory_capacity == 0 {
                return Err(PoolError::Config(format!("gpu device `{}` must have memory_capacity > 0", spec.id)));
            }
            if index.insert(spec.id.clone(), i).is_some() {
                return Err(PoolError::Config(format!("duplicate device id `{}`", spec.id)));
            }
        }
        let n = specs.len();
        Ok(Self { devices: specs, index, reserved: vec![0; n], groups: BTreeMap::new(), next_group: 0 })
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.devices
    }

    pub fn device(&self, id: &str) -> Option<&DeviceSpec> {
        self.index.get(id).map(|&i| &self.devices[i])
    }

    pub fn kind_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for d in &self.devices {
            let key = match d.kind {
                DeviceKind::Gpu => "gpu",
                DeviceKind::Cpu => "cpu",
            };
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }

    pub fn reserved(&self, id: &str) -> Option<u64> {
        self.index.get(id).map(|&i| self.reserved[i])
    }

    pub fn free(&self, id: &str) -> Option<u64> {
        self.index.get(id).map(|&i| self.devices[i].memory_capacity - self.reserved[i])
    }

    pub fn groups(&self) -> impl Iterator<Item = &PlacementGroup> {
        self.groups.values()
    }

    /// Sum of reservations per device recomputed from the live groups.
    pub fn ledger_from_groups(&self) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = self.devices.iter().map(|d| (d.id.clone(), 0)).collect();
        for g in self.groups.values() {
            for s in &g.slots {
                *out.get_mut(&s.device_id).expect("group references known device") += s.memory_reserved;
            }
        }
        out
    }

    /// Reserve `memory_per_slot` on every listed device, all or nothing.
    /// A device listed twice receives two slots.
    pub fn allocate_group(&mut self, request: &AllocationRequest) -> Result<PlacementGroup, PoolError> {
        if request.device_ids.is_empty() {
            return Err(PoolError::Config("allocation request lists no devices".into()));
        }
        let mut demand: BTreeMap<usize, u64> = BTreeMap::new();
        for id in &request.device_ids {
            let &i = self.index.get(id).ok_or_else(|| PoolError::Config(format!("unknown device `{id}`")))?;
            *demand.entry(i).or_insert(0) += request.memory_per_slot;
        }
        for (&i, &want) in &demand {
            let free = self.devices[i].memory_capacity - self.reserved[i];
            if want > free {
                return Err(PoolError::Allocation { device: self.devices[i].id.clone(), requested: want, free });
            }
        }
        for (&i, &want) in &demand {
            self.reserved[i] += want;
        }
        let group = PlacementGroup {
            group_id: GroupId(self.next_group),
            slots: request.device_ids.iter().map(|id| Slot { device_id: id.clone(), memory_reserved: request.memory_per_slot }).collect(),
        };
        self.next_group += 1;
        self.groups.insert(group.group_id, group.clone());
        Ok(group)
    }

    pub fn release_group(&mut self, id: GroupId) -> Result<(), PoolError> {
        let group = self.groups.remove(&id).ok_or_else(|| PoolError::Config(format!("unknown placement group {}", id.0)))?;
        for s in &group.slots {
            let i = self.index[&s.device_id];
            self.reserved[i] -= s.memory_reserved;
        }
        Ok(())
    }

    /// Bind each role's ranks to devices round-robin over the role's device
    /// list, reserving one slot per rank. Either every role binds or the pool
    /// is left untouched.
    pub fn bind_roles(&mut self, mapping: &DeviceMappingConfig, roles: &[(Role, usize)]) -> Result<BindingPlan, PoolError> {
        let snapshot = self.clone();
        match self.bind_roles_inner(mapping, roles) {
            Ok(plan) => Ok(plan),
            Err(e) => {
                *self = snapshot;
                Err(e)
            }
        }
    }

    fn bind_roles_inner(&mut self, mapping: &DeviceMappingConfig, roles: &[(Role, usize)]) -> Result<BindingPlan, PoolError> {
        let mut bindings = Vec::with_capacity(roles.len());
        for &(role, world_size) in roles {
            if world_size == 0 {
                return Err(PoolError::Config(format!("role `{role}` has world_size 0")));
            }
            let entry = mapping.roles.get(&role).ok_or_else(|| PoolError::Config(format!("role `{role}` missing from device mapping")))?;
            if entry.devices.is_empty() {
                return Err(PoolError::Config(format!("role `{role}` maps to an empty device list")));
            }
            let ranks: Vec<String> = (0..world_size).map(|r| entry.devices[r % entry.devices.len()].clone()).collect();
            let group = self.allocate_group(&AllocationRequest { device_ids: ranks.clone(), memory_per_slot: entry.memory_demand })?;
            bindings.push(RoleBinding { role, memory_demand: entry.memory_demand, ranks, group_id: group.group_id });
        }
        let devices = self.devices.iter().zip(&self.reserved).map(|(d, &r)| DeviceLedger { device: d.clone(), reserved: r }).collect();
        Ok(BindingPlan { bindings, devices })
    }

    pub fn unbind(&mut self, plan: &BindingPlan) -> Result<(), PoolError> {
        for b in &plan.bindings {
            self.release_group(b.group_id)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMapping {
    pub devices: Vec<String>,
    pub memory_demand: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMappingConfig {
    pub roles: BTreeMap<Role, RoleMapping>,
}

impl DeviceMappingConfig {
    pub fn with(mut self, role: Role, devices: &[&str], memory_demand: u64) -> Self {
        self.roles.insert(role, RoleMapping { devices: devices.iter().map(|s| s.to_string()).collect(), memory_demand });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleBinding {
    pub role: Role,
    pub memory_demand: u64,
    /// Device of each rank, indexed by rank.
    pub ranks: Vec<String>,
    pub group_id: GroupId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceLedger {
    pub device: DeviceSpec,
    pub reserved: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingPlan {
    pub bindings: Vec<RoleBinding>,
    /// Pool ledger captured right after binding.
    pub devices: Vec<DeviceLedger>,
}

impl BindingPlan {
    pub fn role(&self, role: Role) -> Option<&RoleBinding> {
        self.bindings.iter().find(|b| b.role == role)
    }

    /// `(rank, device_id)` pairs for a role.
    pub fn assignment(&self, role: Role) -> Vec<(usize, String)> {
        self.role(role).map(|b| b.ranks.iter().cloned().enumerate().collect()).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resident {
    pub role: Role,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device_id: String,
    pub kind: DeviceKind,
    pub capacity: u64,
    pub reserved: u64,
    pub free: u64,
    pub residents: Vec<Resident>,
    pub colocated: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColocationReport {
    pub devices: Vec<DeviceReport>,
}

pub fn colocation_report(plan: &BindingPlan) -> ColocationReport {
    let devices = plan
        .devices
        .iter()
        .map(|ledger| {
            let residents: Vec<Resident> = plan
                .bindings
                .iter()
                .flat_map(|b| {
                    b.ranks
                        .iter()
                        .enumerate()
                        .filter(|(_, d)| **d == ledger.device.id)
                        .map(move |(rank, _)| Resident { role: b.role, rank })
                })
                .collect();
            let roles: BTreeSet<Role> = residents.iter().map(|r| r.role).collect();
            DeviceReport {
                device_id: ledger.device.id.clone(),
                kind: ledger.device.kind,
                capacity: ledger.device.memory_capacity,
                reserved: ledger.reserved,
                free: ledger.device.memory_capacity - ledger.reserved,
                residents,
                colocated: roles.len() >= 2,
            }
        })
        .collect();
    ColocationReport { devices }
}

impl ColocationReport {
    pub fn colocated_devices(&self) -> impl Iterator<Item = &DeviceReport> {
        self.devices.iter().filter(|d| d.colocated)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ =
            writeln!(out, "{:<10} {:<4} {:>8} {:>8} {:>8}  {:<9} residents", "device", "kind", "capacity", "reserved", "free", "colocated");
        for d in &self.devices {
            let kind = match d.kind {
                DeviceKind::Gpu => "gpu",
                DeviceKind::Cpu => "cpu",
            };
            let residents: Vec<String> = d.residents.iter().map(|r| format!("{}#{}", r.role, r.rank)).collect();
            let _ = writeln!(
                out,
                "{:<10} {:<4} {:>8} {:>8} {:>8}  {:<9} {}",
                d.device_id,
                kind,
                d.capacity,
                d.reserved,
                d.free,
                if d.colocated { "yes" } else { "no" },
                residents.join(", ")
            );
        }
        out
    }
}
