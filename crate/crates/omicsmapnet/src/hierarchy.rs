//! Functional-annotation hierarchy: parsing of the letter-prefixed htext
//! format, catalog fetching with a byte-identical cache, composition of the
//! five-layer annotation tree, and gene attachment.
//!
//! Tree shape after [`build_annotation_tree`] and [`attach_genes`]:
//! level 0 is the branch root, levels 1..=3 are category nodes, and gene
//! leaves hang off level-3 nodes. A gene annotated under k categories owns
//! k distinct leaves.

use crate::util::{atomic_write, percent_encode};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("line {line}: unknown prefix {prefix:?}")]
    MalformedLine { line: usize, prefix: String },
    #[error("line {line}: level jump from {from} to {to}")]
    OrphanLine { line: usize, from: usize, to: usize },
    #[error("branch {0:?} not found in catalog")]
    BranchNotFound(String),
    #[error("catalog entry {0:?} has no parsed sub-file")]
    MissingSubFile(String),
    #[error("network fetch of {0:?} failed: {1}")]
    NetworkUnavailable(String, String),
    #[error("cache entry for {0:?} is empty")]
    CacheCorrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad tree json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One gene attached to a category node. The same gene id may appear under
/// several categories; each occurrence is a distinct leaf.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneLeaf {
    #[serde(rename = "id")]
    pub kegg_id: String,
    #[serde(rename = "name")]
    pub display_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyNode {
    pub label: String,
    pub level: u8,
    pub children: Vec<HierarchyNode>,
    pub gene_leaves: Vec<GeneLeaf>,
}

impl HierarchyNode {
    fn new(label: impl Into<String>, level: u8) -> Self {
        HierarchyNode { label: label.into(), level, children: Vec::new(), gene_leaves: Vec::new() }
    }

    /// Gene leaves in this subtree, document order (own leaves first).
    pub fn collect_gene_leaves(&self) -> Vec<GeneLeaf> {
        let mut out = self.gene_leaves.clone();
        for child in &self.children {
            out.extend(child.collect_gene_leaves());
        }
        out
    }

    pub fn leaf_count(&self) -> usize {
        self.gene_leaves.len() + self.children.iter().map(HierarchyNode::leaf_count).sum::<usize>()
    }

    fn node_count(&self) -> usize {
        1 + self.children.iter().map(HierarchyNode::node_count).sum::<usize>()
    }

    fn max_depth(&self) -> usize {
        let below = self.children.iter().map(HierarchyNode::max_depth).max().unwrap_or(0);
        let leaf = usize::from(!self.gene_leaves.is_empty());
        1 + below.max(leaf)
    }
}

/// A gene leaf flattened out of the tree together with the labels of its
/// ancestor chain (root down to the owning category node).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneCopy {
    pub kegg_id: String,
    pub display_name: String,
    pub annotation_path: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyTree {
    pub root: HierarchyNode,
}

impl HierarchyTree {
    /// Total number of nodes including the root.
    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    /// Depth in layers including the root; gene leaves count as one layer.
    pub fn depth(&self) -> usize {
        self.root.max_depth()
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaf_count()
    }

    /// All gene leaves in document order, each with its full ancestor path.
    pub fn gene_copies(&self) -> Vec<GeneCopy> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        fn walk(node: &HierarchyNode, path: &mut Vec<String>, out: &mut Vec<GeneCopy>) {
            path.push(node.label.clone());
            for leaf in &node.gene_leaves {
                out.push(GeneCopy {
                    kegg_id: leaf.kegg_id.clone(),
                    display_name: leaf.display_name.clone(),
                    annotation_path: path.clone(),
                });
            }
            for child in &node.children {
                walk(child, path, out);
            }
            path.pop();
        }
        walk(&self.root, &mut path, &mut out);
        out
    }

    /// Distinct gene ids in first-appearance (document) order.
    pub fn gene_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for copy in self.gene_copies() {
            if seen.insert(copy.kegg_id.clone()) {
                out.push(copy.kegg_id);
            }
        }
        out
    }

    /// Nodes at a given level with their ancestor paths (root included).
    pub fn nodes_at_level(&self, level: u8) -> Vec<(Vec<String>, &HierarchyNode)> {
        let mut out = Vec::new();
        fn walk<'a>(
            node: &'a HierarchyNode,
            path: &mut Vec<String>,
            level: u8,
            out: &mut Vec<(Vec<String>, &'a HierarchyNode)>,
        ) {
            path.push(node.label.clone());
            if node.level == level {
                out.push((path.clone(), node));
            }
            for child in &node.children {
                walk(child, path, level, out);
            }
            path.pop();
        }
        walk(&self.root, &mut Vec::new(), level, &mut out);
        out
    }
}

/// Options for [`parse_htext`]. With `loose_ids` every D-line first token is
/// accepted as a gene id; otherwise only `K` followed by digits.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    pub loose_ids: bool,
}

fn is_strict_gene_id(token: &str) -> bool {
    let mut chars = token.chars();
    chars.next() == Some('K') && {
        let rest = chars.as_str();
        !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())
    }
}

/// Drop `<...>` spans; BRITE labels carry HTML markup we do not interpret.
fn strip_markup(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut in_tag = false;
    for ch in label.chars() {
        match ch {
            '<' => in_tag = true,
            '>' => in_tag = false,
            c if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.trim().to_string()
}

pub fn parse_htext(text: &[u8]) -> Result<HierarchyTree, HierarchyError> {
    parse_htext_with(text, ParseOptions::default())
}

/// Parse the letter-prefixed hierarchy format. `A`..`D` lines become nodes
/// at levels 1..=4 under the most recent shallower node; D-lines whose
/// first token looks like a gene id become gene leaves of the enclosing
/// level-3 node. `#` and blank lines are skipped.
pub fn parse_htext_with(text: &[u8], opts: ParseOptions) -> Result<HierarchyTree, HierarchyError> {
    let text = String::from_utf8_lossy(text);
    // stack[i] is the open node at level i; nodes fold into their parent on pop.
    let mut stack: Vec<HierarchyNode> = vec![HierarchyNode::new("root", 0)];

    fn pop_to(stack: &mut Vec<HierarchyNode>, len: usize) {
        while stack.len() > len {
            let done = stack.pop().unwrap();
            stack.last_mut().unwrap().children.push(done);
        }
    }

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let prefix = line.chars().next().unwrap();
        let level = match prefix {
            'A' => 1usize,
            'B' => 2,
            'C' => 3,
            'D' => 4,
            other => {
                return Err(HierarchyError::MalformedLine {
                    line: line_no,
                    prefix: other.to_string(),
                })
            }
        };
        let body = strip_markup(line[1..].trim_start());
        if body.is_empty() {
            return Err(HierarchyError::MalformedLine { line: line_no, prefix: prefix.to_string() });
        }
        if level > stack.len() {
            return Err(HierarchyError::OrphanLine {
                line: line_no,
                from: stack.len() - 1,
                to: level,
            });
        }
        pop_to(&mut stack, level);
        if level == 4 {
            let (token, rest) = match body.split_once(char::is_whitespace) {
                Some((t, r)) => (t, r.trim()),
                None => (body.as_str(), ""),
            };
            if opts.loose_ids || is_strict_gene_id(token) {
                stack[3].gene_leaves.push(GeneLeaf {
                    kegg_id: token.to_string(),
                    display_name: rest.to_string(),
                });
                continue;
            }
        }
        stack.push(HierarchyNode::new(body, level as u8));
    }
    pop_to(&mut stack, 1);
    Ok(HierarchyTree { root: stack.pop().unwrap() })
}

/// Inverse of [`parse_htext`]: the synthetic root is not emitted, gene
/// leaves come before child categories of the same node.
pub fn serialize_htext(tree: &HierarchyTree) -> String {
    let mut out = String::new();
    fn walk(node: &HierarchyNode, out: &mut String) {
        if node.level >= 1 {
            let letter = (b'A' + node.level - 1) as char;
            out.push(letter);
            out.push(' ');
            out.push_str(&node.label);
            out.push('\n');
        }
        for leaf in &node.gene_leaves {
            out.push_str("D ");
            out.push_str(&leaf.kegg_id);
            if !leaf.display_name.is_empty() {
                out.push(' ');
                out.push_str(&leaf.display_name);
            }
            out.push('\n');
        }
        for child in &node.children {
            walk(child, out);
        }
    }
    walk(&tree.root, &mut out);
    out
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    label: String,
    children: Vec<JsonNode>,
    genes: Vec<GeneLeaf>,
}

fn to_json_node(node: &HierarchyNode) -> JsonNode {
    JsonNode {
        label: node.label.clone(),
        children: node.children.iter().map(to_json_node).collect(),
        genes: node.gene_leaves.clone(),
    }
}

fn from_json_node(node: JsonNode, level: u8) -> HierarchyNode {
    HierarchyNode {
        label: node.label,
        level,
        children: node.children.into_iter().map(|c| from_json_node(c, level + 1)).collect(),
        gene_leaves: node.genes,
    }
}

pub fn serialize_json(tree: &HierarchyTree) -> String {
    serde_json::to_string_pretty(&to_json_node(&tree.root)).expect("tree is serializable")
}

pub fn parse_json(text: &str) -> Result<HierarchyTree, HierarchyError> {
    let root: JsonNode = serde_json::from_str(text)?;
    Ok(HierarchyTree { root: from_json_node(root, 0) })
}

/// Return the cached payload for `resource_id`, fetching it over HTTP on a
/// cache miss. Payloads are stored byte-identically and an existing cache
/// entry is never rewritten. Bare ids are resolved against the KEGG REST
/// endpoint; anything containing `://` is used as a URL directly.
pub fn fetch_catalog(resource_id: &str, cache_dir: &Path) -> Result<Vec<u8>, HierarchyError> {
    let cache_path = cache_dir.join(percent_encode(resource_id));
    if cache_path.exists() {
        let bytes = std::fs::read(&cache_path)?;
        if bytes.is_empty() {
            return Err(HierarchyError::CacheCorrupt(resource_id.to_string()));
        }
        return Ok(bytes);
    }
    let url = if resource_id.contains("://") {
        resource_id.to_string()
    } else {
        format!("https://rest.kegg.jp/get/{resource_id}")
    };
    let response = reqwest::blocking::get(&url)
        .map_err(|e| HierarchyError::NetworkUnavailable(resource_id.to_string(), e.to_string()))?;
    if !response.status().is_success() {
        return Err(HierarchyError::NetworkUnavailable(
            resource_id.to_string(),
            format!("HTTP status {}", response.status()),
        ));
    }
    let bytes = response
        .bytes()
        .map_err(|e| HierarchyError::NetworkUnavailable(resource_id.to_string(), e.to_string()))?
        .to_vec();
    atomic_write(&cache_path, &bytes)?;
    Ok(bytes)
}

/// Compose the annotation tree: the named branch of the top catalog supplies
/// level-1 nodes, each sub-file's top groups become level 2 and their
/// children level 3. Structure deeper than level 3 is flattened into its
/// level-3 ancestor, so gene leaves always end up under level-3 nodes.
pub fn build_annotation_tree(
    top_catalog: &HierarchyTree,
    branch_label: &str,
    sub_files: &BTreeMap<String, HierarchyTree>,
) -> Result<HierarchyTree, HierarchyError> {
    let branch = top_catalog
        .root
        .children
        .iter()
        .find(|n| n.label == branch_label)
        .ok_or_else(|| HierarchyError::BranchNotFound(branch_label.to_string()))?;

    let mut root = HierarchyNode::new(branch_label, 0);
    for entry in &branch.children {
        let sub = sub_files
            .get(&entry.label)
            .ok_or_else(|| HierarchyError::MissingSubFile(entry.label.clone()))?;
        let mut level1 = HierarchyNode::new(&entry.label, 1);
        for group in &sub.root.children {
            let mut level2 = HierarchyNode::new(&group.label, 2);
            level2.gene_leaves = group.gene_leaves.clone();
            for sub_group in &group.children {
                let mut level3 = HierarchyNode::new(&sub_group.label, 3);
                level3.gene_leaves = sub_group.collect_gene_leaves();
                level2.children.push(level3);
            }
            level1.children.push(level2);
        }
        root.children.push(level1);
    }
    Ok(HierarchyTree { root })
}

/// Keep only gene leaves whose id is in `id_filter`, dropping duplicate
/// (id, category) pairs and pruning categories left without any leaf
/// descendant. An empty result is legal.
pub fn attach_genes(tree: &HierarchyTree, id_filter: &HashSet<String>) -> HierarchyTree {
    fn filter_node(node: &HierarchyNode, ids: &HashSet<String>) -> Option<HierarchyNode> {
        let mut seen = HashSet::new();
        let gene_leaves: Vec<GeneLeaf> = node
            .gene_leaves
            .iter()
            .filter(|leaf| ids.contains(&leaf.kegg_id) && seen.insert(leaf.kegg_id.clone()))
            .cloned()
            .collect();
        let children: Vec<HierarchyNode> =
            node.children.iter().filter_map(|c| filter_node(c, ids)).collect();
        if gene_leaves.is_empty() && children.is_empty() && node.level > 0 {
            return None;
        }
        Some(HierarchyNode { label: node.label.clone(), level: node.level, children, gene_leaves })
    }
    let root = filter_node(&tree.root, id_filter).unwrap_or_else(|| {
        HierarchyNode::new(tree.root.label.clone(), 0)
    });
    HierarchyTree { root }
}

/// Deterministic toy tree used for synthetic datasets and desk-scale runs:
/// `n_level1 * n_level2 * n_level3` categories, each holding
/// `genes_per_category` unique genes with sequential `K`-style ids.
pub fn synthetic_tree(
    n_level1: usize,
    n_level2: usize,
    n_level3: usize,
    genes_per_category: usize,
) -> HierarchyTree {
    let mut root = HierarchyNode::new("synthetic", 0);
    let mut gene_no = 0usize;
    let mut cat_no = 0usize;
    for i in 0..n_level1 {
        let mut l1 = HierarchyNode::new(format!("F{:02}", i + 1), 1);
        for j in 0..n_level2 {
            let mut l2 = HierarchyNode::new(format!("F{:02}.{}", i + 1, j + 1), 2);
            for _ in 0..n_level3 {
                cat_no += 1;
                let mut l3 = HierarchyNode::new(format!("G{cat_no:02}"), 3);
                for _ in 0..genes_per_category {
                    gene_no += 1;
                    l3.gene_leaves.push(GeneLeaf {
                        kegg_id: format!("K{gene_no:05}"),
                        display_name: format!("gene{gene_no}"),
                    });
                }
                l2.children.push(l3);
            }
            l1.children.push(l2);
        }
        root.children.push(l1);
    }
    HierarchyTree { root }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_chain_parses() {
        let tree = parse_htext(b"A Top\nB Mid\nC Leaf\nD K00001 geneX").unwrap();
        assert_eq!(tree.root.children.len(), 1);
        let a = &tree.root.children[0];
        assert_eq!((a.label.as_str(), a.level), ("Top", 1));
        let c = &a.children[0].children[0];
        assert_eq!(c.label, "Leaf");
        assert_eq!(c.gene_leaves.len(), 1);
        assert_eq!(c.gene_leaves[0].kegg_id, "K00001");
        assert_eq!(c.gene_leaves[0].display_name, "geneX");
        let copies = tree.gene_copies();
        assert_eq!(copies[0].annotation_path, vec!["root", "Top", "Mid", "Leaf"]);
    }

    #[test]
    fn level_jump_is_orphan() {
        let err = parse_htext(b"A Top\nC Leaf").unwrap_err();
        assert!(matches!(err, HierarchyError::OrphanLine { line: 2, .. }), "{err}");
        let err = parse_htext(b"B Mid").unwrap_err();
        assert!(matches!(err, HierarchyError::OrphanLine { line: 1, .. }));
    }

    #[test]
    fn unknown_prefix_is_malformed() {
        let err = parse_htext(b"A Top\nE Deep").unwrap_err();
        assert!(matches!(err, HierarchyError::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn comments_blanks_and_markup() {
        let tree = parse_htext(b"# header\nA <b>Top</b>\n\nB Mid  \n").unwrap();
        assert_eq!(tree.root.children[0].label, "Top");
        assert_eq!(tree.root.children[0].children[0].label, "Mid");
    }

    // Oracle: hand-walked line count. 3 A-sections with 2 B-children each
    // gives 1 (root) + 3 + 6 nodes.
    #[test]
    fn node_count_matches_manual_walk() {
        let mut text = String::new();
        for a in 0..3 {
            text.push_str(&format!("A sect{a}\n"));
            for b in 0..2 {
                text.push_str(&format!("B grp{a}{b}\n"));
            }
        }
        let tree = parse_htext(text.as_bytes()).unwrap();
        assert_eq!(tree.node_count(), 1 + 3 + 6);
    }

    #[test]
    fn non_gene_d_lines_become_category_nodes() {
        let tree = parse_htext(b"A a\nB b\nC c\nD deeper label\nD K00007 g").unwrap();
        let c = &tree.root.children[0].children[0].children[0];
        assert_eq!(c.children.len(), 1);
        assert_eq!(c.children[0].label, "deeper label");
        assert_eq!(c.gene_leaves.len(), 1);
        // Loose mode accepts arbitrary first tokens as gene ids.
        let loose = parse_htext_with(
            b"A a\nB b\nC c\nD deeper label",
            ParseOptions { loose_ids: true },
        )
        .unwrap();
        let c = &loose.root.children[0].children[0].children[0];
        assert_eq!(c.gene_leaves.len(), 1);
        assert_eq!(c.gene_leaves[0].kegg_id, "deeper");
    }

    fn random_tree(seed: u64) -> HierarchyTree {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut root = HierarchyNode::new("root", 0);
        let mut gene = 0;
        for a in 0..rng.gen_range(1..4usize) {
            let mut l1 = HierarchyNode::new(format!("a{a}"), 1);
            for b in 0..rng.gen_range(1..4usize) {
                let mut l2 = HierarchyNode::new(format!("a{a}b{b}"), 2);
                for c in 0..rng.gen_range(1..3usize) {
                    let mut l3 = HierarchyNode::new(format!("a{a}b{b}c{c}"), 3);
                    for _ in 0..rng.gen_range(0..5usize) {
                        gene += 1;
                        // Re-use some ids so genes appear in several positions.
                        let id = format!("K{:05}", if gene % 3 == 0 { 1 } else { gene });
                        l3.gene_leaves.push(GeneLeaf { kegg_id: id, display_name: String::new() });
                    }
                    l2.children.push(l3);
                }
                l1.children.push(l2);
            }
            root.children.push(l1);
        }
        HierarchyTree { root }
    }

    // Property: parse -> serialize -> parse is a fixed point for both formats.
    #[test]
    fn serialization_round_trips_are_fixed_points() {
        for seed in 0..20 {
            let tree = random_tree(seed);
            let text = serialize_htext(&tree);
            let reparsed = parse_htext(text.as_bytes()).unwrap();
            assert_eq!(tree, reparsed, "htext seed {seed}");
            assert_eq!(serialize_htext(&reparsed), text, "htext bytes seed {seed}");
            let json = serialize_json(&tree);
            assert_eq!(parse_json(&json).unwrap(), tree, "json seed {seed}");
        }
    }

    #[test]
    fn build_composes_levels() {
        let catalog = parse_htext(b"A Genes\nB fileX\nB fileY\nA Other\nB fileZ").unwrap();
        let sub = |labels: &[&str]| {
            let mut text = String::new();
            for l in labels {
                text.push_str(&format!("A {l}\nB {l}.sub\nC {l}.leafcat\nD K00001 g\n"));
            }
            parse_htext(text.as_bytes()).unwrap()
        };
        let mut subs = BTreeMap::new();
        subs.insert("fileX".to_string(), sub(&["x1", "x2", "x3"]));
        subs.insert("fileY".to_string(), sub(&["y1", "y2", "y3"]));
        let tree = build_annotation_tree(&catalog, "Genes", &subs).unwrap();
        assert_eq!(tree.root.children.len(), 2);
        let level2: usize = tree.root.children.iter().map(|c| c.children.len()).sum();
        assert_eq!(level2, 6);
        // Genes moved from the sub-files' C nodes up into level-3 nodes.
        let copies = tree.gene_copies();
        assert_eq!(copies.len(), 6);
        assert!(copies.iter().all(|c| c.annotation_path.len() == 4));
        assert_eq!(tree.depth(), 5);
    }

    #[test]
    fn build_accepts_empty_sub_file() {
        let catalog = parse_htext(b"A Genes\nB fileX\nB fileY").unwrap();
        let mut subs = BTreeMap::new();
        subs.insert("fileX".to_string(), parse_htext(b"A only\nB grp").unwrap());
        subs.insert("fileY".to_string(), parse_htext(b"").unwrap());
        let tree = build_annotation_tree(&catalog, "Genes", &subs).unwrap();
        assert_eq!(tree.root.children[0].children.len(), 1);
        assert_eq!(tree.root.children[1].children.len(), 0);
    }

    #[test]
    fn build_reports_missing_sub_file() {
        let catalog = parse_htext(b"A Genes\nB fileX").unwrap();
        let err = build_annotation_tree(&catalog, "Genes", &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, HierarchyError::MissingSubFile(l) if l == "fileX"));
        let catalog2 = parse_htext(b"A Genes").unwrap();
        let err = build_annotation_tree(&catalog2, "Proteins", &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, HierarchyError::BranchNotFound(_)));
    }

    // Oracle: level-2 node count equals the per-file group-line count, on a
    // catalog with the proportions of a real run (57 files, 234 groups).
    #[test]
    fn level2_count_matches_group_line_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut catalog_text = String::from("A Genes\n");
        let mut subs = BTreeMap::new();
        let mut expected_groups = 0usize;
        for f in 0..57 {
            let label = format!("file{f:02}");
            catalog_text.push_str(&format!("B {label}\n"));
            // 234 groups over 57 files: 4 each plus 6 spread at random.
            let n_groups = 4 + usize::from(rng.gen_range(0..57) < 6);
            let mut sub_text = String::new();
            for g in 0..n_groups {
                sub_text.push_str(&format!("A grp{f}_{g}\n"));
            }
            expected_groups += sub_text.lines().filter(|l| l.starts_with("A ")).count();
            subs.insert(label, parse_htext(sub_text.as_bytes()).unwrap());
        }
        let catalog = parse_htext(catalog_text.as_bytes()).unwrap();
        let tree = build_annotation_tree(&catalog, "Genes", &subs).unwrap();
        let level2: usize = tree.root.children.iter().map(|c| c.children.len()).sum();
        assert_eq!(level2, expected_groups);
        assert_eq!(tree.root.children.len(), 57);
    }

    #[test]
    fn attach_empty_filter_leaves_bare_root() {
        let tree = synthetic_tree(2, 2, 2, 3);
        let filtered = attach_genes(&tree, &HashSet::new());
        assert_eq!(filtered.leaf_count(), 0);
        assert!(filtered.root.children.is_empty());
    }

    #[test]
    fn gene_under_two_categories_yields_two_leaves() {
        let text = b"A a\nB b\nC c1\nD K00001 g\nC c2\nD K00001 g";
        let tree = parse_htext(text).unwrap();
        let filter: HashSet<String> = ["K00001".to_string()].into();
        let filtered = attach_genes(&tree, &filter);
        assert_eq!(filtered.leaf_count(), 2);
    }

    // Property: the retained leaf multiset equals a brute-force scan of
    // (id, path) pairs, and pruning never loses or duplicates leaves.
    #[test]
    fn attach_matches_exhaustive_scan() {
        for seed in 0..20 {
            let tree = random_tree(seed);
            let all = tree.gene_copies();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut ids: Vec<String> =
                all.iter().map(|c| c.kegg_id.clone()).collect::<HashSet<_>>().into_iter().collect();
            ids.sort();
            ids.shuffle(&mut rng);
            let filter: HashSet<String> = ids.into_iter().take(rng.gen_range(0..6)).collect();
            let filtered = attach_genes(&tree, &filter);

            // Brute force over (id, path) pairs, deduplicated.
            let mut expected: Vec<(String, Vec<String>)> = Vec::new();
            for copy in &all {
                let pair = (copy.kegg_id.clone(), copy.annotation_path.clone());
                if filter.contains(&copy.kegg_id) && !expected.contains(&pair) {
                    expected.push(pair);
                }
            }
            let got: Vec<(String, Vec<String>)> = filtered
                .gene_copies()
                .into_iter()
                .map(|c| (c.kegg_id, c.annotation_path))
                .collect();
            assert_eq!(got, expected, "seed {seed}");
            assert!(filtered.depth() <= 5);
            // No empty categories survive.
            fn no_empty(node: &HierarchyNode) -> bool {
                node.children.iter().all(|c| c.leaf_count() > 0 && no_empty(c))
            }
            assert!(no_empty(&filtered.root));
            // Conservation: per-category sums equal the total count.
            let per_cat: usize = filtered
                .nodes_at_level(3)
                .iter()
                .map(|(_, n)| n.gene_leaves.len())
                .sum();
            assert_eq!(per_cat, filtered.leaf_count());
        }
    }

    #[test]
    fn fetch_uses_cache_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(percent_encode("br:demo"));
        std::fs::write(&path, b"A Top\n").unwrap();
        let bytes = fetch_catalog("br:demo", dir.path()).unwrap();
        assert_eq!(bytes, b"A Top\n");
        // Second call is the identical payload.
        assert_eq!(fetch_catalog("br:demo", dir.path()).unwrap(), bytes);
    }

    #[test]
    fn fetch_rejects_empty_cache_entry() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(percent_encode("br:empty")), b"").unwrap();
        let err = fetch_catalog("br:empty", dir.path()).unwrap_err();
        assert!(matches!(err, HierarchyError::CacheCorrupt(_)));
    }

    #[test]
    fn fetch_maps_http_failure_to_network_error() {
        // Local listener that answers 404 to everything.
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut sock, _)) = listener.accept() {
                use std::io::{Read, Write};
                let mut buf = [0u8; 1024];
                let _ = sock.read(&mut buf);
                let _ = sock.write_all(b"HTTP/1.1 404 Not Found\r\ncontent-length: 0\r\n\r\n");
            }
        });
        let dir = tempfile::tempdir().unwrap();
        let url = format!("http://{addr}/missing");
        let err = fetch_catalog(&url, dir.path()).unwrap_err();
        assert!(matches!(err, HierarchyError::NetworkUnavailable(..)), "{err}");
        // Nothing was cached for the failed fetch.
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn fetch_stores_payload_byte_identically() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for _ in 0..1 {
                if let Ok((mut sock, _)) = listener.accept() {
                    use std::io::{Read, Write};
                    let mut buf = [0u8; 1024];
                    let _ = sock.read(&mut buf);
                    let _ = sock.write_all(
                        b"HTTP/1.1 200 OK\r\ncontent-length: 8\r\n\r\nA Top\nB ",
                    );
                }
            }
        });
        let dir = tempfile::tempdir().unwrap();
        let url = format!("http://{addr}/thing");
        let first = fetch_catalog(&url, dir.path()).unwrap();
        assert_eq!(first, b"A Top\nB ");
        // Refetch hits the cache (the listener only serves once).
        let second = fetch_catalog(&url, dir.path()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn synthetic_tree_shape() {
        let tree = synthetic_tree(4, 2, 5, 12);
        assert_eq!(tree.nodes_at_level(3).len(), 40);
        assert_eq!(tree.leaf_count(), 480);
        assert_eq!(tree.depth(), 5);
        assert_eq!(tree.gene_ids().len(), 480);
    }
}
