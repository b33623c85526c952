//! Graph ingestion and the target-indexed CSR structure.
//!
//! The CSR here is an *in*-CSR: for each target node `v`, the segment
//! `row_ptr[v]..row_ptr[v+1]` of `src_idx` lists the sources of `v`'s
//! incoming edges. Message-passing kernels aggregate per target over that
//! contiguous segment in one sequential scan. Multi-edges and self-loops are
//! preserved; deduplication would silently change transmission probabilities.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Target-indexed compressed sparse row graph. Immutable after construction
/// and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrGraph {
    num_nodes: usize,
    row_ptr: Vec<u64>,
    src_idx: Vec<u64>,
    weights: Option<Vec<f64>>,
    directed: bool,
}

impl CsrGraph {
    /// Build from raw CSR arrays, validating the structural invariants.
    pub fn from_parts(
        num_nodes: usize,
        row_ptr: Vec<u64>,
        src_idx: Vec<u64>,
        weights: Option<Vec<f64>>,
        directed: bool,
    ) -> Result<Self> {
        if row_ptr.len() != num_nodes + 1 {
            return Err(Error::Validation(format!(
                "row_ptr length {} != num_nodes + 1 = {}",
                row_ptr.len(),
                num_nodes + 1
            )));
        }
        if row_ptr[0] != 0 {
            return Err(Error::Validation("row_ptr[0] must be 0".into()));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Validation("row_ptr must be non-decreasing".into()));
        }
        let m = *row_ptr.last().unwrap() as usize;
        if src_idx.len() != m {
            return Err(Error::Validation(format!(
                "src_idx length {} != row_ptr[N] = {m}",
                src_idx.len()
            )));
        }
        if src_idx.iter().any(|&s| s as usize >= num_nodes) {
            return Err(Error::Validation("src_idx entry out of range".into()));
        }
        if let Some(w) = &weights {
            if w.len() != m {
                return Err(Error::Validation(format!(
                    "weights length {} != edge count {m}",
                    w.len()
                )));
            }
            if w.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                return Err(Error::Validation(
                    "edge weights must be finite and > 0".into(),
                ));
            }
        }
        Ok(Self {
            num_nodes,
            row_ptr,
            src_idx,
            weights,
            directed,
        })
    }

    /// Build from an edge tuple list (`target` receives a message from `src`).
    /// Edge order is preserved within each target's segment.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(u64, u64)],
        edge_weights: Option<&[f64]>,
        directed: bool,
    ) -> Result<Self> {
        let mut deg = vec![0u64; num_nodes];
        for &(src, tgt) in edges {
            if src as usize >= num_nodes || tgt as usize >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge ({src}, {tgt}) out of range for {num_nodes} nodes"
                )));
            }
            deg[tgt as usize] += 1;
        }
        let mut row_ptr = Vec::with_capacity(num_nodes + 1);
        row_ptr.push(0u64);
        let mut acc = 0u64;
        for d in &deg {
            acc += d;
            row_ptr.push(acc);
        }
        let m = acc as usize;
        let mut src_idx = vec![0u64; m];
        let mut weights = edge_weights.map(|_| vec![0f64; m]);
        let mut cursor: Vec<u64> = row_ptr[..num_nodes].to_vec();
        for (i, &(src, tgt)) in edges.iter().enumerate() {
            let pos = cursor[tgt as usize] as usize;
            cursor[tgt as usize] += 1;
            src_idx[pos] = src;
            if let (Some(w), Some(ws)) = (&mut weights, edge_weights) {
                w[pos] = ws[i];
            }
        }
        Self::from_parts(num_nodes, row_ptr, src_idx, weights, directed)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src_idx.len()
    }

    pub fn row_ptr(&self) -> &[u64] {
        &self.row_ptr
    }

    pub fn src_idx(&self) -> &[u64] {
        &self.src_idx
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// In-degree of one node.
    pub fn in_degree(&self, v: usize) -> u64 {
        self.row_ptr[v + 1] - self.row_ptr[v]
    }

    /// In-degree array of length N; entry v is `row_ptr[v+1] - row_ptr[v]`.
    pub fn in_degrees(&self) -> Vec<u64> {
        (0..self.num_nodes).map(|v| self.in_degree(v)).collect()
    }

    pub fn max_in_degree(&self) -> u64 {
        (0..self.num_nodes)
            .map(|v| self.in_degree(v))
            .max()
            .unwrap_or(0)
    }

    /// Index range of `v`'s in-edge segment in `src_idx`/`weights`.
    pub fn in_edge_range(&self, v: usize) -> std::ops::Range<usize> {
        self.row_ptr[v] as usize..self.row_ptr[v + 1] as usize
    }
}

/// Sorted, duplicate-free set of initially active/infected node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet {
    ids: Vec<u64>,
}

impl SeedSet {
    /// Validates range, sorts and deduplicates.
    pub fn new(mut ids: Vec<u64>, num_nodes: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&v| v as usize >= num_nodes) {
            return Err(Error::Validation(format!(
                "seed id {bad} out of range for {num_nodes} nodes"
            )));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(Self { ids })
    }

    pub fn empty() -> Self {
        Self { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Remapping from dense internal ids back to the original external ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    to_original: Vec<u64>,
}

impl IdMap {
    pub fn original_id(&self, dense: usize) -> u64 {
        self.to_original[dense]
    }

    pub fn len(&self) -> usize {
        self.to_original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_original.is_empty()
    }
}

fn parse_id(tok: &str, path: &Path, line_no: usize) -> Result<u64> {
    tok.parse::<u64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: format!("expected a non-negative integer node id, got {tok:?}"),
    })
}

struct RawEdgeList {
    edges: Vec<(u64, u64)>,
    weights: Option<Vec<f64>>,
    header_nodes: Option<u64>,
    max_id: u64,
}

fn read_edge_list(path: &Path, weighted: bool) -> Result<RawEdgeList> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut edges: Vec<(u64, u64)> = Vec::new();
    let mut weights: Option<Vec<f64>> = if weighted { Some(Vec::new()) } else { None };
    let mut header_nodes: Option<u64> = None;
    let mut max_id = 0u64;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('%') {
            // Header line `% nodes=N` overrides the node count.
            let rest = rest.trim();
            let value = rest.strip_prefix("nodes=").ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("unrecognized header directive {trimmed:?}"),
            })?;
            let n = parse_id(value.trim(), path, line_no)?;
            if header_nodes.replace(n).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: "duplicate nodes= header".into(),
                });
            }
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        let expect = if weighted { 3 } else { 2 };
        if toks.len() != expect {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!(
                    "expected {expect} whitespace-separated tokens, found {}",
                    toks.len()
                ),
            });
        }
        let u = parse_id(toks[0], path, line_no)?;
        let v = parse_id(toks[1], path, line_no)?;
        max_id = max_id.max(u).max(v);
        edges.push((u, v));
        if let Some(ws) = &mut weights {
            let w: f64 = toks[2].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected a numeric edge weight, got {:?}", toks[2]),
            })?;
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Validation(format!(
                    "{}:{line_no}: edge weight must be finite and > 0, got {w}",
                    path.display()
                )));
            }
            ws.push(w);
        }
    }
    if edges.is_empty() {
        return Err(Error::Validation(format!(
            "{}: edge list contains no edges",
            path.display()
        )));
    }
    Ok(RawEdgeList {
        edges,
        weights,
        header_nodes,
        max_id,
    })
}

fn assemble(
    raw: RawEdgeList,
    directed: bool,
    remap: bool,
) -> Result<(CsrGraph, Option<IdMap>)> {
    let RawEdgeList {
        mut edges,
        mut weights,
        header_nodes,
        max_id,
    } = raw;

    let id_map = if remap {
        let mut ids: Vec<u64> = edges.iter().flat_map(|&(u, v)| [u, v]).collect();
        ids.sort_unstable();
        ids.dedup();
        let lookup: std::collections::HashMap<u64, u64> = ids
            .iter()
            .enumerate()
            .map(|(dense, &orig)| (orig, dense as u64))
            .collect();
        for (u, v) in edges.iter_mut() {
            *u = lookup[u];
            *v = lookup[v];
        }
        Some(IdMap { to_original: ids })
    } else {
        None
    };

    let implied = if remap {
        id_map.as_ref().unwrap().len() as u64
    } else {
        max_id + 1
    };
    let num_nodes = match header_nodes {
        Some(n) if remap => {
            return Err(Error::Validation(format!(
                "nodes= header ({n}) cannot be combined with id remapping"
            )));
        }
        Some(n) => {
            if n < implied {
                return Err(Error::Validation(format!(
                    "header declares {n} nodes but ids reach {}",
                    implied - 1
                )));
            }
            n as usize
        }
        None => implied as usize,
    };

    // Undirected input: each line contributes both (u,v) and (v,u) with the
    // same weight, so M is exactly twice the line count.
    if !directed {
        let n_in = edges.len();
        for i in 0..n_in {
            let (u, v) = edges[i];
            edges.push((v, u));
        }
        if let Some(ws) = &mut weights {
            for i in 0..n_in {
                let w = ws[i];
                ws.push(w);
            }
        }
    }

    // CSR stores sources per target: edge (u, v) lands in target v's segment.
    let tuples: Vec<(u64, u64)> = edges.iter().map(|&(u, v)| (u, v)).collect();
    let g = CsrGraph::from_edges(num_nodes, &tuples, weights.as_deref(), directed)?;
    Ok((g, id_map))
}

/// Load a whitespace-separated text edge list (`u v` or `u v w` per line,
/// `#` comments, optional `% nodes=N` header). If `directed` is false every
/// edge is symmetrized. Node count is `1 + max id` unless the header says
/// otherwise.
pub fn load_edge_list(path: impl AsRef<Path>, directed: bool, weighted: bool) -> Result<CsrGraph> {
    let raw = read_edge_list(path.as_ref(), weighted)?;
    Ok(assemble(raw, directed, false)?.0)
}

/// Like [`load_edge_list`] but compacts sparse external ids into dense ones,
/// returning the dense-to-original mapping.
pub fn load_edge_list_remapped(
    path: impl AsRef<Path>,
    directed: bool,
    weighted: bool,
) -> Result<(CsrGraph, IdMap)> {
    let raw = read_edge_list(path.as_ref(), weighted)?;
    let (g, map) = assemble(raw, directed, true)?;
    Ok((g, map.expect("remap requested")))
}

/// Top `floor(fraction * N)` nodes by in-degree, ties broken by ascending
/// node id. Deterministic.
pub fn degree_centrality_seeds(g: &CsrGraph, fraction: f64) -> Result<SeedSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "seed fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = g.num_nodes();
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Validation(format!(
            "seed fraction {fraction} of {n} nodes selects no seeds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        g.in_degree(b)
            .cmp(&g.in_degree(a))
            .then_with(|| a.cmp(&b))
    });
    let ids: Vec<u64> = order[..k].iter().map(|&v| v as u64).collect();
    SeedSet::new(ids, n)
}

// ---------------------------------------------------------------------------
// Binary CSR format: magic `GPRC`, version u16, flags u16, N u64, M u64,
// row_ptr (N+1 x u64 LE), src_idx (M x u64 LE), weights (M x f64 LE) when
// flag bit0 is set. Bit1 records directedness; bit2 marks partition shards
// (see the partition module for the shard trailer).
// ---------------------------------------------------------------------------

pub(crate) const GPRC_MAGIC: &[u8; 4] = b"GPRC";
pub(crate) const GPRC_VERSION: u16 = 1;
pub(crate) const FLAG_WEIGHTED: u16 = 1 << 0;
pub(crate) const FLAG_DIRECTED: u16 = 1 << 1;
pub(crate) const FLAG_PARTITION: u16 = 1 << 2;

pub(crate) fn write_u64_array(w: &mut impl Write, xs: &[u64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_f64_array(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64_array(r: &mut impl Read, len: usize) -> std::io::Result<Vec<u64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(u64::from_le_bytes(buf));
    }
    Ok(out)
}

pub(crate) fn read_f64_array(r: &mut impl Read, len: usize) -> std::io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub(crate) fn write_csr_header(
    w: &mut impl Write,
    flags: u16,
    n: u64,
    m: u64,
) -> std::io::Result<()> {
    w.write_all(GPRC_MAGIC)?;
    w.write_all(&GPRC_VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    Ok(())
}

pub(crate) struct CsrHeader {
    pub flags: u16,
    pub n: u64,
    pub m: u64,
}

pub(crate) fn read_csr_header(r: &mut impl Read, path: &Path) -> Result<CsrHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != GPRC_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: bad magic, not a GPRC file",
            path.display()
        )));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|e| Error::io(path, e))?;
    let version = u16::from_le_bytes(b2);
    if version != GPRC_VERSION {
        return Err(Error::Integrity(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut b2).map_err(|e| Error::io(path, e))?;
    let flags = u16::from_le_bytes(b2);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
    let m = u64::from_le_bytes(b8);
    Ok(CsrHeader { flags, n, m })
}

/// Write a graph to the binary CSR format.
pub fn save_binary(g: &CsrGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut flags = 0u16;
    if g.is_weighted() {
        flags |= FLAG_WEIGHTED;
    }
    if g.directed() {
        flags |= FLAG_DIRECTED;
    }
    let res = (|| -> std::io::Result<()> {
        write_csr_header(&mut w, flags, g.num_nodes() as u64, g.num_edges() as u64)?;
        write_u64_array(&mut w, g.row_ptr())?;
        write_u64_array(&mut w, g.src_idx())?;
        if let Some(ws) = g.weights() {
            write_f64_array(&mut w, ws)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Load a graph from the binary CSR format, re-validating all invariants.
pub fn load_binary(path: impl AsRef<Path>) -> Result<CsrGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_csr_header(&mut r, path)?;
    if header.flags & FLAG_PARTITION != 0 {
        return Err(Error::Validation(format!(
            "{}: file is a partition shard, use the partition loader",
            path.display()
        )));
    }
    let n = header.n as usize;
    let m = header.m as usize;
    let row_ptr = read_u64_array(&mut r, n + 1).map_err(|e| Error::io(path, e))?;
    let src_idx = read_u64_array(&mut r, m).map_err(|e| Error::io(path, e))?;
    let weights = if header.flags & FLAG_WEIGHTED != 0 {
        Some(read_f64_array(&mut r, m).map_err(|e| Error::io(path, e))?)
    } else {
        None
    };
    CsrGraph::from_parts(n, row_ptr, src_idx, weights, header.flags & FLAG_DIRECTED != 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn directed_two_edge_path() {
        let f = write_tmp("0 1\n1 2\n");
        let g = load_edge_list(f.path(), true, false).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 2);
        assert_eq!(&g.src_idx()[g.in_edge_range(0)], &[] as &[u64]);
        assert_eq!(&g.src_idx()[g.in_edge_range(1)], &[0]);
        assert_eq!(&g.src_idx()[g.in_edge_range(2)], &[1]);
    }

    #[test]
    fn undirected_symmetrizes() {
        let f = write_tmp("# a comment\n0 1\n");
        let g = load_edge_list(f.path(), false, false).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(&g.src_idx()[g.in_edge_range(0)], &[1]);
        assert_eq!(&g.src_idx()[g.in_edge_range(1)], &[0]);
    }

    #[test]
    fn undirected_edge_count_is_twice_lines() {
        // Multi-edges and self-loops are preserved.
        let f = write_tmp("0 1\n0 1\n2 2\n");
        let g = load_edge_list(f.path(), false, false).unwrap();
        assert_eq!(g.num_edges(), 6);
        assert_eq!(g.in_degree(1), 2);
        assert_eq!(g.in_degree(2), 2);
    }

    #[test]
    fn header_overrides_node_count() {
        let f = write_tmp("% nodes=10\n0 1\n");
        let g = load_edge_list(f.path(), true, false).unwrap();
        assert_eq!(g.num_nodes(), 10);
        let f2 = write_tmp("% nodes=2\n0 5\n");
        assert!(matches!(
            load_edge_list(f2.path(), true, false),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let f = write_tmp("0 1\n0 1 extra\n");
        match load_edge_list(f.path(), true, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("0 -3\n");
        assert!(matches!(
            load_edge_list(f.path(), true, false),
            Err(Error::Parse { line: 1, .. })
        ));
        let f = write_tmp("0 1\n");
        assert!(matches!(
            load_edge_list(f.path(), true, true),
            Err(Error::Parse { line: 1, .. })
        ));
        let f = write_tmp("0 1 0.0\n");
        assert!(matches!(
            load_edge_list(f.path(), true, true),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_edge_list("/nonexistent/edges.txt", true, false),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn empty_edge_list_rejected() {
        let f = write_tmp("# only comments\n");
        assert!(matches!(
            load_edge_list(f.path(), true, false),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn in_degrees_path_and_star() {
        let f = write_tmp("0 1\n1 2\n");
        let g = load_edge_list(f.path(), true, false).unwrap();
        assert_eq!(g.in_degrees(), vec![0, 1, 1]);

        let f = write_tmp("1 0\n2 0\n3 0\n4 0\n");
        let star = load_edge_list(f.path(), true, false).unwrap();
        assert_eq!(star.in_degrees(), vec![4, 0, 0, 0, 0]);
        assert_eq!(star.max_in_degree(), 4);
    }

    #[test]
    fn remapped_sparse_ids() {
        let f = write_tmp("5 1000\n1000 7\n");
        let (g, map) = load_edge_list_remapped(f.path(), true, false).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(map.original_id(0), 5);
        assert_eq!(map.original_id(1), 7);
        assert_eq!(map.original_id(2), 1000);
        // 5 -> 1000 becomes 0 -> 2.
        assert_eq!(&g.src_idx()[g.in_edge_range(2)], &[0]);
    }

    #[test]
    fn seed_selection_ties_and_floor() {
        // In-degrees [3, 1, 3, 0]: ties between 0 and 2 broken by id.
        let edges: Vec<(u64, u64)> = vec![
            (1, 0),
            (2, 0),
            (3, 0),
            (0, 1),
            (0, 2),
            (1, 2),
            (3, 2),
        ];
        let g = CsrGraph::from_edges(4, &edges, None, true).unwrap();
        assert_eq!(g.in_degrees(), vec![3, 1, 3, 0]);
        let seeds = degree_centrality_seeds(&g, 0.5).unwrap();
        assert_eq!(seeds.ids(), &[0, 2]);

        // Uniform degree: fraction 0.25 of 4 nodes keeps only node 0.
        let edges: Vec<(u64, u64)> = (0..4).map(|v| ((v + 1) % 4, v)).collect();
        let g = CsrGraph::from_edges(4, &edges, None, true).unwrap();
        let seeds = degree_centrality_seeds(&g, 0.25).unwrap();
        assert_eq!(seeds.ids(), &[0]);

        assert!(degree_centrality_seeds(&g, 0.1).is_err());
        assert!(degree_centrality_seeds(&g, 0.0).is_err());
        assert!(degree_centrality_seeds(&g, 1.5).is_err());
    }

    #[test]
    fn seed_selection_is_pure() {
        let edges: Vec<(u64, u64)> = vec![(0, 1), (2, 1), (1, 0), (2, 0), (0, 2)];
        let g = CsrGraph::from_edges(3, &edges, None, true).unwrap();
        let a = degree_centrality_seeds(&g, 0.67).unwrap();
        let b = degree_centrality_seeds(&g, 0.67).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn binary_round_trip() {
        let edges: Vec<(u64, u64)> = vec![(0, 1), (1, 2), (2, 0), (0, 2)];
        let ws = [1.0, 2.5, 0.125, 3.0];
        let g = CsrGraph::from_edges(3, &edges, Some(&ws), true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.gprc");
        save_binary(&g, &path).unwrap();
        let g2 = load_binary(&path).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn seedset_sorts_and_dedups() {
        let s = SeedSet::new(vec![3, 1, 3, 0], 5).unwrap();
        assert_eq!(s.ids(), &[0, 1, 3]);
        assert!(SeedSet::new(vec![5], 5).is_err());
    }
}
