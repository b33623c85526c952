//! Target-node graph partitioning with on-disk persistence.
//!
//! Nodes are sorted by non-increasing in-degree (ties by ascending id); with
//! prefix sums `C_i` of the in-degrees and total `W = M`, node `pi_i` goes to
//! shard `ceil(d * C_i / W)`. Every target lives in exactly one shard, and
//! each shard's edge load deviates from `M / d` by strictly less than the
//! maximum in-degree. Zero-in-degree nodes leave the prefix sum unchanged
//! and land in the last shard.
//!
//! Layout on disk: `<root>/manifest.json` plus `part_<q>.gprc` per shard.
//! Shard files extend the binary CSR format (flag bit2): after the weights
//! come the owned-target ids, the global node count, shard counts/index, the
//! parent graph hash, and a trailing FNV-64 checksum of all preceding bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    read_csr_header, write_csr_header, write_f64_array, write_u64_array, CsrGraph, FLAG_DIRECTED,
    FLAG_PARTITION, FLAG_WEIGHTED,
};

/// One shard: the owned targets and the induced in-CSR over them. Row `i`
/// holds the in-edges of global node `owned_targets[i]`; source ids stay
/// global because every worker holds the full state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Shard number in `1..=num_parts`.
    pub index: u32,
    pub owned_targets: Vec<u64>,
    pub row_ptr: Vec<u64>,
    pub src_idx: Vec<u64>,
    pub weights: Option<Vec<f64>>,
    pub global_num_nodes: u64,
    pub num_parts: u32,
    /// Hash of the source graph, for stale-partition detection.
    pub graph_hash: u64,
    pub directed: bool,
}

impl Partition {
    pub fn edge_load(&self) -> u64 {
        *self.row_ptr.last().unwrap_or(&0)
    }

    pub fn num_rows(&self) -> usize {
        self.owned_targets.len()
    }
}

/// Assign every node to a shard by the sorted prefix-sum rule and build the
/// induced sub-CSRs. Pure function of `(g, n_parts)`.
pub fn generate_partition(g: &CsrGraph, n_parts: u32) -> Result<Vec<Partition>> {
    let n = g.num_nodes();
    let m = g.num_edges() as u64;
    if n_parts < 1 || n_parts as usize > n {
        return Err(Error::Validation(format!(
            "n_parts must be in [1, {n}], got {n_parts}"
        )));
    }
    if m == 0 {
        return Err(Error::Validation(
            "cannot partition an edgeless graph (total weight is zero)".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        g.in_degree(b)
            .cmp(&g.in_degree(a))
            .then_with(|| a.cmp(&b))
    });

    let d = n_parts as u128;
    let w_total = m as u128;
    let mut owned: Vec<Vec<u64>> = vec![Vec::new(); n_parts as usize];
    let mut prefix: u128 = 0;
    for &v in &order {
        prefix += g.in_degree(v) as u128;
        // q = ceil(d * C_i / W), clamped into 1..=d for the zero-degree tail.
        let q = ((d * prefix + w_total - 1) / w_total).clamp(1, d) as usize;
        owned[q - 1].push(v as u64);
    }

    let source_hash = graph_hash(g);
    let mut parts = Vec::with_capacity(n_parts as usize);
    for (q0, mut targets) in owned.into_iter().enumerate() {
        targets.sort_unstable();
        let mut row_ptr = Vec::with_capacity(targets.len() + 1);
        row_ptr.push(0u64);
        let mut src_idx = Vec::new();
        let mut weights = g.weights().map(|_| Vec::new());
        for &v in &targets {
            let seg = g.in_edge_range(v as usize);
            src_idx.extend_from_slice(&g.src_idx()[seg.clone()]);
            if let (Some(out), Some(ws)) = (&mut weights, g.weights()) {
                out.extend_from_slice(&ws[seg]);
            }
            row_ptr.push(src_idx.len() as u64);
        }
        parts.push(Partition {
            index: q0 as u32 + 1,
            owned_targets: targets,
            row_ptr,
            src_idx,
            weights,
            global_num_nodes: n as u64,
            num_parts: n_parts,
            graph_hash: source_hash,
            directed: g.directed(),
        });
    }
    Ok(parts)
}

// --- hashing -----------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Clone, Copy)]
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Self(FNV_OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// FNV-64 over (N, M, row_ptr, src_idx); detects stale partitions cheaply.
pub fn graph_hash(g: &CsrGraph) -> u64 {
    let mut h = Fnv64::new();
    h.write(&(g.num_nodes() as u64).to_le_bytes());
    h.write(&(g.num_edges() as u64).to_le_bytes());
    for &x in g.row_ptr() {
        h.write(&x.to_le_bytes());
    }
    for &x in g.src_idx() {
        h.write(&x.to_le_bytes());
    }
    h.finish()
}

// --- persistence ---------------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub format_version: u32,
    pub num_parts: u32,
    pub global_num_nodes: u64,
    /// Hex-encoded 64-bit hash of the source graph.
    pub graph_hash: String,
}

fn shard_path(root: &Path, idx: u32) -> PathBuf {
    root.join(format!("part_{idx}.gprc"))
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

/// Write all shards plus `manifest.json` under `root`.
pub fn save_partitions(parts: &[Partition], root: impl AsRef<Path>) -> Result<PartitionManifest> {
    let root = root.as_ref();
    if parts.is_empty() {
        return Err(Error::Validation("no partitions to save".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let num_parts = parts[0].num_parts;
    let manifest = PartitionManifest {
        format_version: MANIFEST_VERSION,
        num_parts,
        global_num_nodes: parts[0].global_num_nodes,
        graph_hash: format!("{:016x}", parts[0].graph_hash),
    };
    for part in parts {
        let path = shard_path(root, part.index);
        let bytes = encode_shard(part);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let mpath = manifest_path(root);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?;
    fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
    Ok(manifest)
}

fn encode_shard(part: &Partition) -> Vec<u8> {
    let mut buf: Vec<u8> = Vec::new();
    let mut flags = FLAG_PARTITION;
    if part.weights.is_some() {
        flags |= FLAG_WEIGHTED;
    }
    if part.directed {
        flags |= FLAG_DIRECTED;
    }
    write_csr_header(
        &mut buf,
        flags,
        part.num_rows() as u64,
        part.src_idx.len() as u64,
    )
    .expect("vec write");
    write_u64_array(&mut buf, &part.row_ptr).expect("vec write");
    write_u64_array(&mut buf, &part.src_idx).expect("vec write");
    if let Some(ws) = &part.weights {
        write_f64_array(&mut buf, ws).expect("vec write");
    }
    write_u64_array(&mut buf, &part.owned_targets).expect("vec write");
    buf.extend_from_slice(&part.global_num_nodes.to_le_bytes());
    buf.extend_from_slice(&part.num_parts.to_le_bytes());
    buf.extend_from_slice(&part.index.to_le_bytes());
    buf.extend_from_slice(&part.graph_hash.to_le_bytes());
    let mut h = Fnv64::new();
    h.write(&buf);
    buf.extend_from_slice(&h.finish().to_le_bytes());
    buf
}

/// Read `manifest.json` under `root`.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<PartitionManifest> {
    let path = manifest_path(root.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PartitionManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Integrity(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Load one shard, verifying the checksum and the manifest's graph hash.
/// Returns the shard and its owned-target list.
pub fn load_partition(root: impl AsRef<Path>, partition_idx: u32) -> Result<(Partition, Vec<u64>)> {
    let root = root.as_ref();
    let manifest = load_manifest(root)?;
    if partition_idx < 1 || partition_idx > manifest.num_parts {
        return Err(Error::Validation(format!(
            "partition index {partition_idx} out of range; valid range is 1..={}",
            manifest.num_parts
        )));
    }
    let path = shard_path(root, partition_idx);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let part = decode_shard(&bytes, &path, &manifest, partition_idx)?;
    let owned = part.owned_targets.clone();
    Ok((part, owned))
}

fn decode_shard(
    bytes: &[u8],
    path: &Path,
    manifest: &PartitionManifest,
    expect_idx: u32,
) -> Result<Partition> {
    // Trailer: global_num_nodes u64, num_parts u32, index u32, graph_hash
    // u64, checksum u64.
    const TRAILER: usize = 8 + 4 + 4 + 8 + 8;
    if bytes.len() < TRAILER + 20 {
        return Err(Error::Integrity(format!(
            "{}: truncated shard file",
            path.display()
        )));
    }
    let (body, checksum_bytes) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(checksum_bytes.try_into().unwrap());
    let mut h = Fnv64::new();
    h.write(body);
    if h.finish() != stored {
        return Err(Error::Integrity(format!(
            "{}: checksum mismatch, file is corrupt",
            path.display()
        )));
    }

    let mut cursor = std::io::Cursor::new(body);
    let header = read_csr_header(&mut cursor, path)?;
    if header.flags & FLAG_PARTITION == 0 {
        return Err(Error::Integrity(format!(
            "{}: not a partition shard",
            path.display()
        )));
    }
    let rows = header.n as usize;
    let m = header.m as usize;
    let read_err = |e: std::io::Error| Error::io(path, e);
    let row_ptr = crate::graph::read_u64_array(&mut cursor, rows + 1).map_err(read_err)?;
    let src_idx = crate::graph::read_u64_array(&mut cursor, m).map_err(read_err)?;
    let weights = if header.flags & FLAG_WEIGHTED != 0 {
        Some(crate::graph::read_f64_array(&mut cursor, m).map_err(read_err)?)
    } else {
        None
    };
    let owned_targets = crate::graph::read_u64_array(&mut cursor, rows).map_err(read_err)?;
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    use std::io::Read;
    cursor.read_exact(&mut b8).map_err(read_err)?;
    let global_num_nodes = u64::from_le_bytes(b8);
    cursor.read_exact(&mut b4).map_err(read_err)?;
    let num_parts = u32::from_le_bytes(b4);
    cursor.read_exact(&mut b4).map_err(read_err)?;
    let index = u32::from_le_bytes(b4);
    cursor.read_exact(&mut b8).map_err(read_err)?;
    let stored_graph_hash = u64::from_le_bytes(b8);

    if format!("{stored_graph_hash:016x}") != manifest.graph_hash {
        return Err(Error::Integrity(format!(
            "{}: shard was generated from a different graph than the manifest",
            path.display()
        )));
    }
    if index != expect_idx || num_parts != manifest.num_parts
        || global_num_nodes != manifest.global_num_nodes
    {
        return Err(Error::Integrity(format!(
            "{}: shard metadata disagrees with the manifest",
            path.display()
        )));
    }
    if row_ptr.first() != Some(&0)
        || row_ptr.windows(2).any(|w| w[0] > w[1])
        || *row_ptr.last().unwrap() as usize != m
    {
        return Err(Error::Integrity(format!(
            "{}: malformed shard row pointers",
            path.display()
        )));
    }
    if src_idx.iter().any(|&s| s >= global_num_nodes) {
        return Err(Error::Integrity(format!(
            "{}: shard source id out of range",
            path.display()
        )));
    }
    if owned_targets.windows(2).any(|w| w[0] >= w[1])
        || owned_targets.iter().any(|&t| t >= global_num_nodes)
    {
        return Err(Error::Integrity(format!(
            "{}: malformed owned-target list",
            path.display()
        )));
    }
    Ok(Partition {
        index,
        owned_targets,
        row_ptr,
        src_idx,
        weights,
        global_num_nodes,
        num_parts,
        graph_hash: stored_graph_hash,
        directed: header.flags & FLAG_DIRECTED != 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Graph with prescribed in-degrees; sources cycle over the nodes.
    fn graph_with_in_degrees(degs: &[u64]) -> CsrGraph {
        let n = degs.len();
        let mut edges = Vec::new();
        for (v, &d) in degs.iter().enumerate() {
            for i in 0..d {
                edges.push((((v as u64 + i + 1) % n as u64), v as u64));
            }
        }
        CsrGraph::from_edges(n, &edges, None, true).unwrap()
    }

    #[test]
    fn worked_example_from_prefix_rule() {
        // In-degrees {a:5, b:3, c:2, d:2}, d = 2: C = [5, 8, 10, 12],
        // q = [1, 2, 2, 2], so P1 = {a} (load 5), P2 = {b, c, d} (load 7).
        let g = graph_with_in_degrees(&[5, 3, 2, 2]);
        let parts = generate_partition(&g, 2).unwrap();
        assert_eq!(parts[0].owned_targets, vec![0]);
        assert_eq!(parts[0].edge_load(), 5);
        assert_eq!(parts[1].owned_targets, vec![1, 2, 3]);
        assert_eq!(parts[1].edge_load(), 7);
        let ideal = 12.0 / 2.0;
        for p in &parts {
            assert!((p.edge_load() as f64 - ideal).abs() < 5.0);
        }
    }

    #[test]
    fn single_partition_is_whole_graph() {
        let g = graph_with_in_degrees(&[3, 1, 2, 4]);
        let parts = generate_partition(&g, 1).unwrap();
        assert_eq!(parts.len(), 1);
        let p = &parts[0];
        assert_eq!(p.owned_targets, vec![0, 1, 2, 3]);
        assert_eq!(p.row_ptr, g.row_ptr());
        assert_eq!(p.src_idx, g.src_idx());
    }

    #[test]
    fn uniform_degree_balances_exactly() {
        let g = graph_with_in_degrees(&[2; 8]);
        let parts = generate_partition(&g, 4).unwrap();
        for p in &parts {
            assert_eq!(p.edge_load(), 4);
            assert_eq!(p.num_rows(), 2);
        }
    }

    #[test]
    fn zero_degree_nodes_go_to_last_shard() {
        let g = graph_with_in_degrees(&[4, 4, 0, 0]);
        let parts = generate_partition(&g, 2).unwrap();
        assert_eq!(parts[0].owned_targets, vec![0]);
        assert_eq!(parts[1].owned_targets, vec![1, 2, 3]);
    }

    #[test]
    fn disjoint_cover_and_balance_bound() {
        let degs: Vec<u64> = (0..40).map(|i| (i * 7 + 3) % 11).collect();
        let g = graph_with_in_degrees(&degs);
        let m = g.num_edges() as f64;
        let w_max = g.max_in_degree() as f64;
        for d in [2u32, 3, 4, 8] {
            let parts = generate_partition(&g, d).unwrap();
            let mut seen = vec![false; g.num_nodes()];
            let mut total_edges = 0u64;
            for p in &parts {
                for &t in &p.owned_targets {
                    assert!(!seen[t as usize], "target owned twice");
                    seen[t as usize] = true;
                }
                total_edges += p.edge_load();
                assert!(
                    (p.edge_load() as f64 - m / d as f64).abs() < w_max,
                    "shard {} load {} violates the balance bound",
                    p.index,
                    p.edge_load()
                );
            }
            assert!(seen.iter().all(|&s| s), "cover misses a target");
            assert_eq!(total_edges, g.num_edges() as u64);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = graph_with_in_degrees(&[1, 5, 3, 3, 2, 0, 7]);
        assert_eq!(
            generate_partition(&g, 3).unwrap(),
            generate_partition(&g, 3).unwrap()
        );
    }

    #[test]
    fn invalid_part_counts() {
        let g = graph_with_in_degrees(&[1, 1]);
        assert!(generate_partition(&g, 0).is_err());
        assert!(generate_partition(&g, 3).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let degs: Vec<u64> = vec![3, 0, 5, 2, 2, 1];
        let g = graph_with_in_degrees(&degs);
        let parts = generate_partition(&g, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_partitions(&parts, dir.path()).unwrap();
        assert_eq!(manifest.num_parts, 3);
        let mut edge_sum = 0u64;
        for q in 1..=3u32 {
            let (p, owned) = load_partition(dir.path(), q).unwrap();
            assert_eq!(p, parts[(q - 1) as usize]);
            assert_eq!(owned, parts[(q - 1) as usize].owned_targets);
            edge_sum += p.edge_load();
        }
        assert_eq!(edge_sum, g.num_edges() as u64);
    }

    #[test]
    fn index_out_of_range_names_valid_range() {
        let g = graph_with_in_degrees(&[2, 2]);
        let parts = generate_partition(&g, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_partitions(&parts, dir.path()).unwrap();
        match load_partition(dir.path(), 5) {
            Err(Error::Validation(msg)) => assert!(msg.contains("1..=2"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_shard_is_integrity_error() {
        let g = graph_with_in_degrees(&[4, 3, 2, 1]);
        let parts = generate_partition(&g, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_partitions(&parts, dir.path()).unwrap();
        let path = dir.path().join("part_1.gprc");
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_partition(dir.path(), 1),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn stale_manifest_hash_is_integrity_error() {
        let g = graph_with_in_degrees(&[4, 3, 2, 1]);
        let parts = generate_partition(&g, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_partitions(&parts, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut manifest: PartitionManifest =
            serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        manifest.graph_hash = format!("{:016x}", 0xdead_beefu64);
        fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(
            load_partition(dir.path(), 1),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn edgeless_graph_rejected() {
        let g = CsrGraph::from_parts(3, vec![0, 0, 0, 0], vec![], None, true).unwrap();
        assert!(matches!(
            generate_partition(&g, 2),
            Err(Error::Validation(_))
        ));
    }
}
