//! Embedding bundles: the in-memory dataset type, its on-disk directory
//! format, split views, subsampling and the synthetic group-shift generator.
//!
//! On-disk layout of a bundle directory:
//!
//! ```text
//! manifest.txt          key = value lines (format_version = 1, dim, n_samples,
//!                       n_classes, n_groups, class_names, group_names,
//!                       n_group_prompts)
//! embeddings.bin        little-endian f32, n_samples x dim, row-major, no header
//! class_embeddings.bin  little-endian f32, n_classes x dim
//! labels.csv            header `index,class,group,split`, LF line endings
//! group_prompts.bin     optional, n_group_prompts x dim
//! group_prompts.csv     optional, header `index,class,group`
//! ```
//!
//! Name lists in the manifest are comma separated, so names may not contain
//! commas or line breaks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::{l2_normalize, norm, Matrix, Rng};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.txt";
const EMBEDDINGS: &str = "embeddings.bin";
const CLASS_EMBEDDINGS: &str = "class_embeddings.bin";
const LABELS: &str = "labels.csv";
const PROMPTS_BIN: &str = "group_prompts.bin";
const PROMPTS_CSV: &str = "group_prompts.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Prompt embeddings that carry group information, one row per
/// (class, group) annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPrompts {
    pub embeds: Matrix,
    pub classes: Vec<usize>,
    pub groups: Vec<usize>,
}

/// N sample embeddings with class, group and split labels, plus one
/// embedding per class.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub samples: Matrix,
    pub class_embeds: Matrix,
    pub class_labels: Vec<usize>,
    pub group_labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub class_names: Vec<String>,
    pub group_names: Vec<String>,
    pub group_prompts: Option<GroupPrompts>,
}

impl EmbeddingBundle {
    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_embeds.rows()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    /// Indices whose split is `split`, in bundle order.
    pub fn split_view(&self, split: Split) -> Vec<usize> {
        split_view(self, split)
    }

    /// Distinct (class, group) cells present in `indices`, sorted.
    pub fn cells(&self, indices: &[usize]) -> Vec<(usize, usize)> {
        indices
            .iter()
            .map(|&i| (self.class_labels[i], self.group_labels[i]))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Checks every structural invariant of the type.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        let d = self.dim();
        let c = self.n_classes();
        let g = self.n_groups();
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if d == 0 {
            return invalid("embedding dimension is zero".into());
        }
        if self.class_embeds.cols() != d {
            return Err(Error::shape("bundle class embeddings", d, self.class_embeds.cols()));
        }
        if c == 0 || g == 0 {
            return invalid("bundle needs at least one class and one group".into());
        }
        for (what, len) in [
            ("class_labels", self.class_labels.len()),
            ("group_labels", self.group_labels.len()),
            ("splits", self.splits.len()),
        ] {
            if len != n {
                return Err(Error::shape(what, n, len));
            }
        }
        if self.class_names.len() != c {
            return Err(Error::shape("class_names", c, self.class_names.len()));
        }
        for name in self.class_names.iter().chain(&self.group_names) {
            if name.is_empty() || name.contains([',', '\n', '\r']) || name.trim() != name {
                return invalid(format!("bad class/group name {name:?}"));
            }
        }
        if let Some(i) = self.class_labels.iter().position(|&y| y >= c) {
            return invalid(format!("row {i}: class {} >= {c}", self.class_labels[i]));
        }
        if let Some(i) = self.group_labels.iter().position(|&x| x >= g) {
            return invalid(format!("row {i}: group {} >= {g}", self.group_labels[i]));
        }
        if !self.samples.is_finite() || !self.class_embeds.is_finite() {
            return Err(Error::NonFinite("bundle embeddings"));
        }
        if let Some(i) = self.samples.iter_rows().position(|r| r.iter().all(|&x| x == 0.0)) {
            return invalid(format!("row {i} is all zeros"));
        }
        let train: BTreeSet<_> = self.cells(&self.split_view(Split::Train)).into_iter().collect();
        for split in [Split::Val, Split::Test] {
            for cell in self.cells(&self.split_view(split)) {
                if !train.contains(&cell) {
                    return invalid(format!(
                        "(class {}, group {}) appears in {split} but not in train",
                        cell.0, cell.1
                    ));
                }
            }
        }
        if let Some(p) = &self.group_prompts {
            if p.embeds.cols() != d {
                return Err(Error::shape("group prompt embeddings", d, p.embeds.cols()));
            }
            if p.classes.len() != p.embeds.rows() || p.groups.len() != p.embeds.rows() {
                return Err(Error::shape(
                    "group prompt annotations",
                    p.embeds.rows(),
                    p.classes.len().min(p.groups.len()),
                ));
            }
            if p.classes.iter().any(|&y| y >= c) || p.groups.iter().any(|&x| x >= g) {
                return invalid("group prompt annotation out of range".into());
            }
            if !p.embeds.is_finite() {
                return Err(Error::NonFinite("group prompt embeddings"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the exact bytes [`save_bundle`] writes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in encode_files(self) {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn split_view(b: &EmbeddingBundle, split: Split) -> Vec<usize> {
    b.splits
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == split)
        .map(|(i, _)| i)
        .collect()
}

fn f32_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 4);
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn encode_files(b: &EmbeddingBundle) -> Vec<(&'static str, Vec<u8>)> {
    let n_prompts = b.group_prompts.as_ref().map_or(0, |p| p.embeds.rows());
    let manifest = format!(
        "format_version = {FORMAT_VERSION}\n\
         dim = {}\n\
         n_samples = {}\n\
         n_classes = {}\n\
         n_groups = {}\n\
         class_names = {}\n\
         group_names = {}\n\
         n_group_prompts = {n_prompts}\n",
        b.dim(),
        b.n_samples(),
        b.n_classes(),
        b.n_groups(),
        b.class_names.join(","),
        b.group_names.join(","),
    );
    let mut labels = String::from("index,class,group,split\n");
    for i in 0..b.n_samples() {
        labels.push_str(&format!(
            "{i},{},{},{}\n",
            b.class_labels[i], b.group_labels[i], b.splits[i]
        ));
    }
    let mut files = vec![
        (MANIFEST, manifest.into_bytes()),
        (EMBEDDINGS, f32_bytes(&b.samples)),
        (CLASS_EMBEDDINGS, f32_bytes(&b.class_embeds)),
        (LABELS, labels.into_bytes()),
    ];
    if let Some(p) = &b.group_prompts {
        let mut csv = String::from("index,class,group\n");
        for i in 0..p.embeds.rows() {
            csv.push_str(&format!("{i},{},{}\n", p.classes[i], p.groups[i]));
        }
        files.push((PROMPTS_BIN, f32_bytes(&p.embeds)));
        files.push((PROMPTS_CSV, csv.into_bytes()));
    }
    files
}

/// Writes `b` into `dir` (created if missing). Each file is replaced
/// atomically.
pub fn save_bundle(b: &EmbeddingBundle, dir: &Path) -> Result<()> {
    b.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in encode_files(b) {
        write_atomic(&dir.join(name), &bytes)?;
    }
    if b.group_prompts.is_none() {
        for stale in [PROMPTS_BIN, PROMPTS_CSV] {
            let p = dir.join(stale);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn format_err(file: &str, offset: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_string(),
        offset: offset as u64,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Lines of a text file paired with their starting byte offsets.
fn lines_with_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        out.push((start, line.trim_end_matches('\n')));
        start += line.len();
    }
    out
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    let bytes = read_file(dir, name)?;
    String::from_utf8(bytes).map_err(|e| {
        format_err(name, e.utf8_error().valid_up_to(), "<utf-8>", "file is not valid UTF-8")
    })
}

fn read_matrix(dir: &Path, name: &str, field: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_file(dir, name)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(format_err(
            name,
            bytes.len().min(expected),
            field,
            format!("expected {expected} bytes ({rows}x{cols} f32), found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

struct Manifest {
    entries: BTreeMap<String, (usize, String)>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (off, line) in lines_with_offsets(text) {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(MANIFEST, off, "<line>", "expected `key = value`"))?;
            entries.insert(k.trim().to_string(), (off, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    fn get(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(o, v)| (*o, v.as_str()))
            .ok_or_else(|| format_err(MANIFEST, 0, key, "missing key"))
    }

    fn count(&self, key: &str) -> Result<usize> {
        let (off, v) = self.get(key)?;
        v.parse()
            .map_err(|_| format_err(MANIFEST, off, key, format!("not a count: {v:?}")))
    }

    fn names(&self, key: &str) -> Result<Vec<String>> {
        let (_, v) = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        Ok(v.split(',').map(|s| s.trim().to_string()).collect())
    }
}

fn parse_csv_rows<'a>(
    file: &str,
    text: &'a str,
    header: &str,
    expected_rows: usize,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let lines = lines_with_offsets(text);
    let Some(&(_, first)) = lines.first() else {
        return Err(format_err(file, 0, "<header>", "empty file"));
    };
    if first.trim_end_matches('\r') != header {
        return Err(format_err(file, 0, "<header>", format!("expected header `{header}`")));
    }
    let ncols = header.split(',').count();
    let mut rows = Vec::with_capacity(expected_rows);
    for &(off, line) in &lines[1..] {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(format_err(
                file,
                off,
                "<row>",
                format!("expected {ncols} fields, found {}", fields.len()),
            ));
        }
        rows.push((off, fields));
    }
    if rows.len() != expected_rows {
        return Err(format_err(
            file,
            text.len(),
            "<rows>",
            format!("expected {expected_rows} rows, found {}", rows.len()),
        ));
    }
    Ok(rows)
}

fn parse_field<T: FromStr>(file: &str, off: usize, field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| format_err(file, off, field, format!("cannot parse {v:?}")))
}

/// Reads a bundle directory written by [`save_bundle`] or by an external
/// extraction script following the same layout.
pub fn load_bundle(dir: &Path) -> Result<EmbeddingBundle> {
    let manifest = Manifest::parse(&read_text(dir, MANIFEST)?)?;
    let (voff, version) = manifest.get("format_version")?;
    if version != FORMAT_VERSION.to_string() {
        if version.parse::<u32>().is_err() {
            return Err(format_err(MANIFEST, voff, "format_version", "not an integer"));
        }
        return Err(Error::VersionMismatch {
            file: MANIFEST.into(),
            found: version.to_string(),
            supported: FORMAT_VERSION,
        });
    }
    let dim = manifest.count("dim")?;
    let n = manifest.count("n_samples")?;
    let c = manifest.count("n_classes")?;
    let g = manifest.count("n_groups")?;
    let class_names = manifest.names("class_names")?;
    let group_names = manifest.names("group_names")?;
    if class_names.len() != c {
        let (off, _) = manifest.get("class_names")?;
        return Err(format_err(MANIFEST, off, "class_names", format!("expected {c} names")));
    }
    if group_names.len() != g {
        let (off, _) = manifest.get("group_names")?;
        return Err(format_err(MANIFEST, off, "group_names", format!("expected {g} names")));
    }
    let n_prompts = manifest.count("n_group_prompts").unwrap_or(0);

    let samples = read_matrix(dir, EMBEDDINGS, "embeddings", n, dim)?;
    let class_embeds = read_matrix(dir, CLASS_EMBEDDINGS, "class_embeddings", c, dim)?;

    let labels_text = read_text(dir, LABELS)?;
    let rows = parse_csv_rows(LABELS, &labels_text, "index,class,group,split", n)?;
    let mut class_labels = Vec::with_capacity(n);
    let mut group_labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for (i, (off, f)) in rows.into_iter().enumerate() {
        let idx: usize = parse_field(LABELS, off, "index", f[0])?;
        if idx != i {
            return Err(format_err(LABELS, off, "index", format!("expected {i}, found {idx}")));
        }
        class_labels.push(parse_field(LABELS, off, "class", f[1])?);
        group_labels.push(parse_field(LABELS, off, "group", f[2])?);
        splits.push(parse_field(LABELS, off, "split", f[3].trim_end_matches('\r'))?);
    }

    let group_prompts = if n_prompts > 0 {
        let embeds = read_matrix(dir, PROMPTS_BIN, "group_prompts", n_prompts, dim)?;
        let text = read_text(dir, PROMPTS_CSV)?;
        let rows = parse_csv_rows(PROMPTS_CSV, &text, "index,class,group", n_prompts)?;
        let mut classes = Vec::with_capacity(n_prompts);
        let mut groups = Vec::with_capacity(n_prompts);
        for (off, f) in rows {
            classes.push(parse_field(PROMPTS_CSV, off, "class", f[1])?);
            groups.push(parse_field(PROMPTS_CSV, off, "group", f[2].trim_end_matches('\r'))?);
        }
        Some(GroupPrompts {
            embeds,
            classes,
            groups,
        })
    } else {
        None
    };

    let bundle = EmbeddingBundle {
        samples,
        class_embeds,
        class_labels,
        group_labels,
        splits,
        class_names,
        group_names,
        group_prompts,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Keeps `n` training rows with per-(class, group) counts proportional to
/// the original, every cell keeping at least one row. Val and test rows are
/// untouched. Dropped rows are removed from the returned bundle.
pub fn subsample_preserving_ratios(
    b: &EmbeddingBundle,
    n: usize,
    rng: &mut Rng,
) -> Result<EmbeddingBundle> {
    let train = b.split_view(Split::Train);
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in &train {
        cells
            .entry((b.class_labels[i], b.group_labels[i]))
            .or_default()
            .push(i);
    }
    if n > train.len() {
        return Err(Error::TooFewSamples(format!(
            "requested {n} training rows, only {} available",
            train.len()
        )));
    }
    if n < cells.len() {
        return Err(Error::TooFewSamples(format!(
            "{n} rows cannot cover {} (class, group) cells",
            cells.len()
        )));
    }
    let sizes: Vec<usize> = cells.values().map(Vec::len).collect();
    let targets = largest_remainder(&sizes, n);

    let mut keep = vec![false; b.n_samples()];
    for (idx, target) in cells.values().zip(targets) {
        for pick in rng.sample_distinct(idx.len(), target) {
            keep[idx[pick]] = true;
        }
    }
    for (i, s) in b.splits.iter().enumerate() {
        if *s != Split::Train {
            keep[i] = true;
        }
    }
    let rows: Vec<usize> = (0..b.n_samples()).filter(|&i| keep[i]).collect();
    Ok(EmbeddingBundle {
        samples: b.samples.select_rows(&rows),
        class_embeds: b.class_embeds.clone(),
        class_labels: rows.iter().map(|&i| b.class_labels[i]).collect(),
        group_labels: rows.iter().map(|&i| b.group_labels[i]).collect(),
        splits: rows.iter().map(|&i| b.splits[i]).collect(),
        class_names: b.class_names.clone(),
        group_names: b.group_names.clone(),
        group_prompts: b.group_prompts.clone(),
    })
}

/// Apportions `n` over cells of the given sizes: floor of the exact quota
/// (at least 1, at most the cell size), then leftover units by largest
/// remainder with ties to the earlier cell. Cells are ordered by
/// (class, group), so earlier means lower group id within a class.
pub(crate) fn largest_remainder(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&s| n as f64 * s as f64 / total as f64)
        .collect();
    let mut out: Vec<usize> = quotas
        .iter()
        .zip(sizes)
        .map(|(q, &s)| (q.floor() as usize).clamp(1, s))
        .collect();
    let rem = |i: usize| quotas[i] - quotas[i].floor();
    let mut assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    while assigned < n {
        let before = assigned;
        for &i in &order {
            if assigned == n {
                break;
            }
            if out[i] < sizes[i] {
                out[i] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    while assigned > n {
        let before = assigned;
        for &i in order.iter().rev() {
            if assigned == n {
                break;
            }
            if out[i] > 1 {
                out[i] -= 1;
                assigned -= 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    out
}

/// Which kind of group shift a synthetic bundle simulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// A background-like direction shared across classes with opposite
    /// signs; the minority of one class shares it with the majority of the
    /// other.
    Confounder,
    /// Each class is a mixture of class-specific subclasses.
    Subclass,
    /// A canonical source plus sources that add their own distortion,
    /// partly class specific.
    DataSource,
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub shift_kind: ShiftKind,
    pub classes: usize,
    pub groups_per_class: usize,
    pub dim: usize,
    /// Share of each class's training rows outside the majority group.
    pub minority_fraction: f64,
    pub class_sep: f64,
    pub group_sep: f64,
    pub spurious_mix: f64,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.groups_per_class < 1 {
            return bad("need at least 1 group per class");
        }
        if !(self.minority_fraction > 0.0 && self.minority_fraction <= 0.5) {
            return bad("minority_fraction must be in (0, 0.5]");
        }
        if !(self.class_sep >= 0.0 && self.group_sep >= 0.0) {
            return bad("separations must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.spurious_mix) {
            return bad("spurious_mix must be in [0, 1]");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be > 0");
        }
        if self.dim < self.directions_needed() {
            return Err(Error::InvalidSpec(format!(
                "dim {} too small, {} orthogonal directions needed",
                self.dim,
                self.directions_needed()
            )));
        }
        let cells = self.classes * self.groups_per_class;
        if self.n_train < cells || self.n_val < cells || self.n_test < cells {
            return Err(Error::InvalidSpec(format!(
                "every split needs at least one row per (class, group) cell ({cells})"
            )));
        }
        Ok(())
    }

    fn directions_needed(&self) -> usize {
        let (c, g) = (self.classes, self.groups_per_class);
        c + match self.shift_kind {
            ShiftKind::Confounder if g == 2 => 1,
            ShiftKind::Confounder => g,
            ShiftKind::Subclass => c * g,
            ShiftKind::DataSource => (g - 1) * (c + 1),
        }
    }
}

fn orthonormal_directions(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn axpy(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()
}

/// Rows per group for one class in one split.
fn group_counts(n_class: usize, groups: usize, majority: usize, minority_fraction: f64, balanced: bool) -> Vec<usize> {
    let weights: Vec<f64> = (0..groups)
        .map(|g| {
            if balanced || groups == 1 {
                1.0
            } else if g == majority {
                1.0 - minority_fraction
            } else {
                minority_fraction / (groups - 1) as f64
            }
        })
        .collect();
    // Scale weights to integer pseudo-sizes; largest_remainder only needs proportions.
    let sizes: Vec<usize> = weights.iter().map(|w| (w * 1e6).round() as usize).collect();
    let mut counts = largest_remainder(&sizes, n_class);
    // largest_remainder caps at the pseudo-size, which is never binding here.
    counts.iter_mut().for_each(|c| *c = (*c).max(1));
    counts
}

fn split_evenly(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| n / parts + usize::from(i < n % parts))
        .collect()
}

/// Generates a bundle of Gaussian group clusters around unit-norm group
/// means. Train follows `minority_fraction`; val and test are group
/// balanced. Fully determined by `spec`.
pub fn generate_synthetic(spec: &ShiftSpec) -> Result<EmbeddingBundle> {
    spec.validate()?;
    let (c, g, d) = (spec.classes, spec.groups_per_class, spec.dim);
    let mut rng = Rng::new(spec.seed);
    let dirs = orthonormal_directions(spec.directions_needed(), d, &mut rng);
    let class_dirs = &dirs[..c];
    let extra = &dirs[c..];
    let scale = spec.class_sep / std::f64::consts::SQRT_2;
    let gs = spec.group_sep;

    // group_means[y][k] and the majority group of each class.
    let mut group_means = vec![vec![Vec::new(); g]; c];
    let mut majority = vec![0usize; c];
    for y in 0..c {
        let e = &class_dirs[y];
        for k in 0..g {
            let mean = match spec.shift_kind {
                ShiftKind::Confounder => {
                    majority[y] = y % g;
                    if g == 2 {
                        // Class y's majority sits on +d for even y, -d for odd y.
                        let sign = if k == 0 { 1.0 } else { -1.0 };
                        axpy(scale, e, sign * gs, &extra[0])
                    } else {
                        axpy(scale, e, gs, &extra[k])
                    }
                }
                ShiftKind::Subclass => axpy(scale, e, gs, &extra[y * g + k]),
                ShiftKind::DataSource => {
                    if k == 0 {
                        e.iter().map(|x| scale * x).collect()
                    } else {
                        let shared = &extra[k - 1];
                        let own = &extra[(g - 1) + y * (g - 1) + (k - 1)];
                        let distortion = unit(axpy(1.0, shared, 1.0, own));
                        axpy(scale, e, gs, &distortion)
                    }
                }
            };
            group_means[y][k] = if norm(&mean) > 0.0 { unit(mean) } else { e.clone() };
        }
    }

    let mut class_rows = Vec::with_capacity(c);
    for y in 0..c {
        let mut m = vec![0.0; d];
        for k in 0..g {
            m.iter_mut().zip(&group_means[y][k]).for_each(|(a, b)| *a += b);
        }
        let m = unit(m);
        let v = unit(axpy(1.0 - spec.spurious_mix, &m, spec.spurious_mix, &group_means[y][majority[y]]));
        class_rows.push(v.iter().map(|&x| x as f32).collect::<Vec<f32>>());
    }
    let class_embeds = Matrix::from_rows(d, &class_rows)?;

    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut class_labels = Vec::new();
    let mut group_labels = Vec::new();
    let mut splits = Vec::new();
    for (split, total) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        let per_class = split_evenly(total, c);
        let mut block: Vec<(usize, usize)> = Vec::with_capacity(total);
        for y in 0..c {
            let counts = group_counts(
                per_class[y],
                g,
                majority[y],
                spec.minority_fraction,
                split != Split::Train,
            );
            for (k, &cnt) in counts.iter().enumerate() {
                block.extend(std::iter::repeat((y, k)).take(cnt));
            }
        }
        rng.shuffle(&mut block);
        for (y, k) in block {
            let noisy: Vec<f64> = group_means[y][k]
                .iter()
                .map(|&mu| mu + spec.noise_sigma * rng.normal())
                .collect();
            let x = l2_normalize(&noisy, 1e-12)?;
            rows.push(x.into_iter().map(|v| v as f32).collect());
            class_labels.push(y);
            group_labels.push(k);
            splits.push(split);
        }
    }

    let prompt_rows: Vec<Vec<f32>> = (0..c)
        .flat_map(|y| (0..g).map(move |k| (y, k)))
        .map(|(y, k)| {
            let v: Vec<f64> = class_rows[y].iter().map(|&x| x as f64).collect();
            unit(axpy(1.0, &v, 1.0, &group_means[y][k]))
                .into_iter()
                .map(|x| x as f32)
                .collect()
        })
        .collect();
    let group_prompts = GroupPrompts {
        embeds: Matrix::from_rows(d, &prompt_rows)?,
        classes: (0..c).flat_map(|y| std::iter::repeat(y).take(g)).collect(),
        groups: (0..c).flat_map(|_| 0..g).collect(),
    };

    let group_word = match spec.shift_kind {
        ShiftKind::Confounder => "background",
        ShiftKind::Subclass => "subclass",
        ShiftKind::DataSource => "source",
    };
    let bundle = EmbeddingBundle {
        samples: Matrix::from_rows(d, &rows)?,
        class_embeds,
        class_labels,
        group_labels,
        splits,
        class_names: (0..c).map(|y| format!("class_{y}")).collect(),
        group_names: (0..g).map(|k| format!("{group_word}_{k}")).collect(),
        group_prompts: Some(group_prompts),
    };
    bundle.validate()?;
    Ok(bundle)
}
