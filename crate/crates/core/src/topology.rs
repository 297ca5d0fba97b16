//! Edge-network model: devices, links, chain/mesh structure, the
//! layer-to-device assignment, and communication-cost arithmetic.
//!
//! Device ids are 0-based internally and 1-based in config files. Ids
//! double as the processing order: a chain is `1 -> 2 -> ... -> M`; a mesh
//! is a chain prefix up to the root, parallel branch devices, and an
//! aggregating suffix ending at device `M`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Wireless,
    Wired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub id: usize,
    pub name: String,
    /// Relative compute speed; 1.0 is the reference device. Faster devices
    /// receive proportionally more layers and execute each candidate
    /// proportionally faster.
    pub speed_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub tx: usize,
    pub rx: usize,
    pub capacity_mbps: f64,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Chain,
    Mesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub kind: TopologyKind,
    pub devices: Vec<DeviceProfile>,
    pub links: Vec<LinkSpec>,
    /// Mesh only: devices on the serial part of the route.
    pub chain_set: Vec<usize>,
    /// Mesh only: the root plus its parallel branch devices.
    pub tree_set: Vec<usize>,
    /// Mesh only: the device that broadcasts to the branches.
    pub root: Option<usize>,
}

// --- file schema (1-based ids) ---

#[derive(Debug, Serialize, Deserialize)]
struct TopologyFile {
    kind: TopologyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    chain_set: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tree_set: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    root: Option<usize>,
    devices: Vec<DeviceFile>,
    links: Vec<LinkFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeviceFile {
    id: usize,
    name: String,
    speed_factor: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkFile {
    tx: usize,
    rx: usize,
    capacity_mbps: f64,
    kind: LinkKind,
}

impl Topology {
    /// Parses and validates a topology config document.
    pub fn parse(text: &str) -> Result<Self> {
        let file: TopologyFile = toml::from_str(text)
            .map_err(|e| Error::parse("topology config", e.to_string()))?;
        let m = file.devices.len();
        if m == 0 {
            return Err(Error::Topology("no devices declared".to_string()));
        }
        let mut devices: Vec<Option<DeviceProfile>> = vec![None; m];
        for d in &file.devices {
            if d.id == 0 || d.id > m {
                return Err(Error::Topology(format!(
                    "device id {} outside 1..={m} (ids must be contiguous)",
                    d.id
                )));
            }
            if d.speed_factor <= 0.0 || !d.speed_factor.is_finite() {
                return Err(Error::Topology(format!(
                    "device {} has non-positive speed_factor",
                    d.id
                )));
            }
            if devices[d.id - 1].is_some() {
                return Err(Error::Topology(format!("duplicate device id {}", d.id)));
            }
            devices[d.id - 1] = Some(DeviceProfile {
                id: d.id - 1,
                name: d.name.clone(),
                speed_factor: d.speed_factor,
            });
        }
        let devices: Vec<DeviceProfile> = devices.into_iter().map(|d| d.unwrap()).collect();

        let mut links = Vec::new();
        for l in &file.links {
            if l.tx == 0 || l.tx > m || l.rx == 0 || l.rx > m {
                return Err(Error::Topology(format!(
                    "link {} -> {} references an unknown device (have {m})",
                    l.tx, l.rx
                )));
            }
            if l.tx == l.rx {
                return Err(Error::Topology(format!("link {} -> {} is a self-loop", l.tx, l.rx)));
            }
            if l.capacity_mbps <= 0.0 || !l.capacity_mbps.is_finite() {
                return Err(Error::Topology(format!(
                    "link {} -> {} has non-positive capacity",
                    l.tx, l.rx
                )));
            }
            links.push(LinkSpec {
                tx: l.tx - 1,
                rx: l.rx - 1,
                capacity_mbps: l.capacity_mbps,
                kind: l.kind,
            });
        }

        let to_zero_based = |set: &Option<Vec<usize>>, what: &str| -> Result<Vec<usize>> {
            let mut out = Vec::new();
            if let Some(ids) = set {
                for &id in ids {
                    if id == 0 || id > m {
                        return Err(Error::Topology(format!("{what} contains unknown device {id}")));
                    }
                    out.push(id - 1);
                }
            }
            out.sort_unstable();
            Ok(out)
        };
        let topo = Topology {
            kind: file.kind,
            devices,
            links,
            chain_set: to_zero_based(&file.chain_set, "chain_set")?,
            tree_set: to_zero_based(&file.tree_set, "tree_set")?,
            root: match file.root {
                Some(0) => return Err(Error::Topology("root id 0 (ids are 1-based)".to_string())),
                Some(r) if r > m => {
                    return Err(Error::Topology(format!("root {r} is not a device")))
                }
                Some(r) => Some(r - 1),
                None => None,
            },
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Serializes back to the config format; `parse` of the output yields
    /// an equal topology.
    pub fn to_toml(&self) -> String {
        let file = TopologyFile {
            kind: self.kind,
            chain_set: if self.kind == TopologyKind::Mesh {
                Some(self.chain_set.iter().map(|d| d + 1).collect())
            } else {
                None
            },
            tree_set: if self.kind == TopologyKind::Mesh {
                Some(self.tree_set.iter().map(|d| d + 1).collect())
            } else {
                None
            },
            root: self.root.map(|r| r + 1),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceFile {
                    id: d.id + 1,
                    name: d.name.clone(),
                    speed_factor: d.speed_factor,
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkFile {
                    tx: l.tx + 1,
                    rx: l.rx + 1,
                    capacity_mbps: l.capacity_mbps,
                    kind: l.kind,
                })
                .collect(),
        };
        toml::to_string(&file).expect("topology serialization cannot fail")
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    /// The device that holds the network output; it never transmits.
    pub fn last_device(&self) -> usize {
        self.num_devices() - 1
    }

    /// Mesh branch devices (the tree set without the root), ascending.
    pub fn branches(&self) -> Vec<usize> {
        match self.root {
            Some(r) => self.tree_set.iter().copied().filter(|&d| d != r).collect(),
            None => Vec::new(),
        }
    }

    /// Mesh: the chain device that receives every branch output.
    pub fn aggregation_device(&self) -> Result<usize> {
        let branches = self.branches();
        let last_branch = *branches.last().ok_or_else(|| {
            Error::Topology("mesh has no branch devices".to_string())
        })?;
        Ok(last_branch + 1)
    }

    pub fn link_between(&self, tx: usize, rx: usize) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.tx == tx && l.rx == rx)
    }

    /// Devices a payload travels to after `device` finishes its block.
    pub fn downstream(&self, device: usize) -> Vec<usize> {
        match self.kind {
            TopologyKind::Chain => {
                if device + 1 < self.num_devices() {
                    vec![device + 1]
                } else {
                    vec![]
                }
            }
            TopologyKind::Mesh => {
                let root = self.root.expect("validated mesh has a root");
                let branches = self.branches();
                if device == root {
                    branches
                } else if branches.contains(&device) {
                    vec![branches.last().unwrap() + 1]
                } else if device + 1 < self.num_devices() {
                    vec![device + 1]
                } else {
                    vec![]
                }
            }
        }
    }

    /// Checks the structural invariants; `parse` runs this automatically.
    pub fn validate(&self) -> Result<()> {
        let m = self.num_devices();
        match self.kind {
            TopologyKind::Chain => {
                if !self.chain_set.is_empty() || !self.tree_set.is_empty() || self.root.is_some() {
                    return Err(Error::Topology(
                        "chain_set/tree_set/root are mesh-only fields".to_string(),
                    ));
                }
                self.expect_links(&(0..m.saturating_sub(1)).map(|i| (i, i + 1)).collect::<Vec<_>>())
            }
            TopologyKind::Mesh => {
                let root = self
                    .root
                    .ok_or_else(|| Error::Topology("mesh needs a root".to_string()))?;
                if !self.tree_set.contains(&root) {
                    return Err(Error::Topology(format!(
                        "root {} must be in the tree set",
                        root + 1
                    )));
                }
                // chain_set and tree_set partition the devices.
                let mut all: Vec<usize> = self
                    .chain_set
                    .iter()
                    .chain(self.tree_set.iter())
                    .copied()
                    .collect();
                all.sort_unstable();
                if all != (0..m).collect::<Vec<_>>() {
                    return Err(Error::Topology(
                        "chain_set and tree_set must partition the device ids".to_string(),
                    ));
                }
                let branches = self.branches();
                if branches.is_empty() {
                    return Err(Error::Topology(
                        "mesh needs at least one branch device".to_string(),
                    ));
                }
                // Canonical id layout: prefix chain, root, branches, suffix chain.
                let expect_branches: Vec<usize> = (root + 1..root + 1 + branches.len()).collect();
                if branches != expect_branches {
                    return Err(Error::Topology(format!(
                        "branch devices must immediately follow the root (expected ids {:?})",
                        expect_branches.iter().map(|d| d + 1).collect::<Vec<_>>()
                    )));
                }
                let agg = root + branches.len() + 1;
                if agg > m - 1 {
                    return Err(Error::Topology(
                        "mesh needs an aggregation device after the branches".to_string(),
                    ));
                }
                let mut expect_chain: Vec<usize> = (0..root).collect();
                expect_chain.extend(agg..m);
                if self.chain_set != expect_chain {
                    return Err(Error::Topology(format!(
                        "chain_set must be the prefix and suffix devices {:?}",
                        expect_chain.iter().map(|d| d + 1).collect::<Vec<_>>()
                    )));
                }
                let mut expect_links: Vec<(usize, usize)> =
                    (0..root).map(|i| (i, i + 1)).collect();
                for &b in &branches {
                    expect_links.push((root, b));
                }
                for &b in &branches {
                    expect_links.push((b, agg));
                }
                expect_links.extend((agg..m - 1).map(|i| (i, i + 1)));
                self.expect_links(&expect_links)
            }
        }
    }

    fn expect_links(&self, expected: &[(usize, usize)]) -> Result<()> {
        let mut have: Vec<(usize, usize)> = self.links.iter().map(|l| (l.tx, l.rx)).collect();
        have.sort_unstable();
        let mut want = expected.to_vec();
        want.sort_unstable();
        if have != want {
            let missing: Vec<String> = want
                .iter()
                .filter(|p| !have.contains(p))
                .map(|(a, b)| format!("{} -> {}", a + 1, b + 1))
                .collect();
            let extra: Vec<String> = have
                .iter()
                .filter(|p| !want.contains(p))
                .map(|(a, b)| format!("{} -> {}", a + 1, b + 1))
                .collect();
            return Err(Error::Topology(format!(
                "link structure does not match the {:?} layout (missing: [{}], unexpected: [{}])",
                self.kind,
                missing.join(", "),
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

/// Transmission latency of a payload over one link, in milliseconds.
pub fn comm_latency(output_bits: u64, link: &LinkSpec) -> f64 {
    output_bits as f64 / (link.capacity_mbps * 1e3)
}

/// Payload size of an activation with the given shape contract, at 32 bits
/// per value. An empty shape means no payload.
pub fn output_bits(shape: &[usize]) -> u64 {
    if shape.is_empty() {
        return 0;
    }
    32 * shape.iter().product::<usize>() as u64
}

/// The layer blocks held by each device. Layers are 0-based and each
/// device's block is contiguous; blocks are concatenated in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAssignment {
    pub blocks: Vec<Vec<usize>>,
}

impl LayerAssignment {
    pub fn n_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// d(m): the last layer executed on device `m`.
    pub fn last_layer(&self, device: usize) -> Option<usize> {
        self.blocks[device].last().copied()
    }

    /// The device hosting a given layer.
    pub fn device_of(&self, layer: usize) -> Option<usize> {
        self.blocks
            .iter()
            .position(|b| b.contains(&layer))
    }
}

/// Splits `n_layers` into contiguous per-device blocks, at least one layer
/// per device, the remainder sized proportionally to each device's
/// speed_factor and rounded by largest remainder (ties to the lower id).
pub fn build_assignment(n_layers: usize, topo: &Topology) -> Result<LayerAssignment> {
    let m = topo.num_devices();
    if n_layers < m {
        return Err(Error::Config(format!(
            "{n_layers} layers cannot cover {m} devices (need at least one layer per device)"
        )));
    }
    let speeds: Vec<f64> = topo.devices.iter().map(|d| d.speed_factor).collect();
    let total_speed: f64 = speeds.iter().sum();
    let extra = n_layers - m;
    let quotas: Vec<f64> = speeds
        .iter()
        .map(|s| extra as f64 * s / total_speed)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let mut leftover = n_layers - counts.iter().sum::<usize>();
    // Largest remainder, ties broken by lower device id.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &d in &order {
        if leftover == 0 {
            break;
        }
        counts[d] += 1;
        leftover -= 1;
    }
    let mut blocks = Vec::with_capacity(m);
    let mut next = 0;
    for &c in &counts {
        blocks.push((next..next + c).collect());
        next += c;
    }
    debug_assert_eq!(next, n_layers);
    Ok(LayerAssignment { blocks })
}
