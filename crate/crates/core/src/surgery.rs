//! Block partitions, student initialization from teacher layers, and
//! zero-shot patching of teacher blocks back into a student.
//!
//! Layer and block indices in this module are 1-based, matching the JSON
//! manifests written next to sweep outputs.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LmHead, ParameterSet};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepRule {
    /// Keep layers 1, 1+k, 1+2k, … and always the last layer.
    #[serde(alias = "last")]
    KeepLast,
    /// Keep layers 1, 2, 2+k, 2+2k, … and always the last layer.
    #[serde(alias = "first2")]
    KeepFirstTwo,
}

/// Assignment of the teacher's `N` layers to `M` contiguous blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    starts: Vec<usize>,
    n_teacher_layers: usize,
}

impl BlockPartition {
    pub fn new(starts: Vec<usize>, n_teacher_layers: usize) -> Result<Self> {
        if starts.first() != Some(&1) {
            return Err(Error::Partition(format!("first block must start at layer 1: {starts:?}")));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Partition(format!("starts must strictly increase: {starts:?}")));
        }
        if *starts.last().unwrap() > n_teacher_layers {
            return Err(Error::Partition(format!(
                "start {} beyond {n_teacher_layers} teacher layers",
                starts.last().unwrap()
            )));
        }
        Ok(Self {
            starts,
            n_teacher_layers,
        })
    }

    /// Every teacher layer is its own block.
    pub fn identity(n: usize) -> Result<Self> {
        Self::new((1..=n).collect(), n)
    }

    pub fn every_kth(n: usize, k: usize, rule: KeepRule) -> Result<Self> {
        if k < 2 {
            return Err(Error::Partition(format!("keep-every must be at least 2, got {k}")));
        }
        if n < k + 1 {
            return Err(Error::Partition(format!(
                "{n} teacher layers cannot form two blocks with k={k}"
            )));
        }
        let mut starts = match rule {
            KeepRule::KeepLast => (1..=n).step_by(k).collect::<Vec<_>>(),
            KeepRule::KeepFirstTwo => std::iter::once(1).chain((2..=n).step_by(k)).collect(),
        };
        if starts.last() != Some(&n) {
            starts.push(n);
        }
        Self::new(starts, n)
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// `M`
    pub fn n_blocks(&self) -> usize {
        self.starts.len()
    }

    /// `N`
    pub fn n_teacher_layers(&self) -> usize {
        self.n_teacher_layers
    }

    /// Teacher layers covered by block `i` (1-based).
    pub fn block(&self, i: usize) -> RangeInclusive<usize> {
        let start = self.starts[i - 1];
        let end = self
            .starts
            .get(i)
            .map(|&next| next - 1)
            .unwrap_or(self.n_teacher_layers);
        start..=end
    }

    pub fn block_len(&self, i: usize) -> usize {
        self.block(i).count()
    }

    /// Teacher layer whose output student layer `i` is aligned to: the last layer of its block.
    pub fn alignment_target(&self, i: usize) -> usize {
        *self.block(i).end()
    }

    pub fn blocks(&self) -> impl Iterator<Item = RangeInclusive<usize>> + '_ {
        (1..=self.n_blocks()).map(|i| self.block(i))
    }

    /// Number of layers after patching `set`.
    pub fn patched_size(&self, set: &PatchSet) -> usize {
        self.n_blocks() + set.iter().map(|i| self.block_len(i) - 1).sum::<usize>()
    }

    /// Teacher-layer index sequence of the model built from `set`, with
    /// un-patched student layers reported by the teacher layer they were initialized from.
    pub fn layer_sources(&self, set: &PatchSet) -> Vec<LayerSource> {
        let mut out = Vec::new();
        for i in 1..=self.n_blocks() {
            if set.contains(i) {
                out.extend(self.block(i).map(LayerSource::Teacher));
            } else {
                out.push(LayerSource::Student(i));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSource {
    Student(usize),
    Teacher(usize),
}

/// Student layers (1-based) replaced by their teacher blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchSet(BTreeSet<usize>);

impl PatchSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full(m: usize) -> Self {
        Self((1..=m).collect())
    }

    pub fn insert(&mut self, i: usize) -> bool {
        self.0.insert(i)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.0.is_subset(&other.0)
    }

    fn check(&self, m: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i == 0 || i > m) {
            Some(i) => Err(Error::Patch(format!("index {i} outside 1..={m}"))),
            None => Ok(()),
        }
    }
}

impl FromIterator<usize> for PatchSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl std::fmt::Display for PatchSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let items: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "[{}]", items.join(","))
    }
}

/// Permutation of `1..=M` giving the order in which blocks are patched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchOrder(Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPreset {
    Backward,
    Forward,
    Similarity,
}

impl std::str::FromStr for OrderPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(Self::Backward),
            "forward" => Ok(Self::Forward),
            "similarity" | "similarity_guided" => Ok(Self::Similarity),
            other => Err(Error::Invalid(format!("unknown patch order `{other}`"))),
        }
    }
}

impl PatchOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let m = order.len();
        let mut seen = vec![false; m + 1];
        for &i in &order {
            if i == 0 || i > m || seen[i] {
                return Err(Error::Patch(format!("{order:?} is not a permutation of 1..={m}")));
            }
            seen[i] = true;
        }
        Ok(Self(order))
    }

    /// `M, M−1, …, 1`
    pub fn backward(m: usize) -> Self {
        Self((1..=m).rev().collect())
    }

    /// `1, 2, …, M`
    pub fn forward(m: usize) -> Self {
        Self((1..=m).collect())
    }

    /// Lowest block similarity first; ties go to the lower index.
    pub fn by_similarity(block_similarity: &[f64]) -> Result<Self> {
        if block_similarity.is_empty() || block_similarity.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("block similarities missing or non-finite".into()));
        }
        let mut idx: Vec<usize> = (1..=block_similarity.len()).collect();
        idx.sort_by(|&a, &b| {
            block_similarity[a - 1]
                .total_cmp(&block_similarity[b - 1])
                .then(a.cmp(&b))
        });
        Ok(Self(idx))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Prefix patch sets `∅, {o₁}, {o₁,o₂}, …`.
    pub fn prefixes(&self) -> Vec<PatchSet> {
        (0..=self.0.len())
            .map(|n| self.0[..n].iter().copied().collect())
            .collect()
    }
}

fn check_pair<T: Real>(
    student: &ParameterSet<T>,
    teacher: &ParameterSet<T>,
    partition: &BlockPartition,
) -> Result<()> {
    if teacher.n_layers() != partition.n_teacher_layers() {
        return Err(Error::Partition(format!(
            "teacher has {} layers, partition expects {}",
            teacher.n_layers(),
            partition.n_teacher_layers()
        )));
    }
    if student.n_layers() != partition.n_blocks() {
        return Err(Error::Partition(format!(
            "student has {} layers, partition has {} blocks",
            student.n_layers(),
            partition.n_blocks()
        )));
    }
    if !student.config.block_compatible(&teacher.config) {
        return Err(Error::Patch("student and teacher widths differ".into()));
    }
    Ok(())
}

/// Student whose layer `i` is a copy of teacher layer `ℓ_i`; embedding,
/// positions, final norm and head are copied from the teacher.
pub fn init_student<T: Real>(teacher: &ParameterSet<T>, partition: &BlockPartition) -> Result<ParameterSet<T>> {
    if teacher.n_layers() != partition.n_teacher_layers() {
        return Err(Error::Partition(format!(
            "teacher has {} layers, partition expects {}",
            teacher.n_layers(),
            partition.n_teacher_layers()
        )));
    }
    let layers = partition
        .starts()
        .iter()
        .map(|&l| teacher.layers[l - 1].clone())
        .collect();
    Ok(ParameterSet {
        config: teacher.config.with_layers(partition.n_blocks()),
        embedding: teacher.embedding.clone(),
        positions: teacher.positions.clone(),
        layers,
        final_norm: teacher.final_norm.clone(),
        head: teacher.head.clone(),
    })
}

/// Which model supplies the final norm of a patched model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalNormSource {
    /// Same model as the LM head (the one contributing the last layer).
    #[default]
    WithHead,
    /// Same model as the embedding (the one contributing the first layer).
    WithEmbedding,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub final_norm: FinalNormSource,
}

/// Replace every student layer in `set` by its teacher block.
pub fn patch<T: Real>(
    student: &ParameterSet<T>,
    teacher: &ParameterSet<T>,
    partition: &BlockPartition,
    set: &PatchSet,
) -> Result<ParameterSet<T>> {
    patch_with(student, teacher, partition, set, PatchOptions::default())
}

pub fn patch_with<T: Real>(
    student: &ParameterSet<T>,
    teacher: &ParameterSet<T>,
    partition: &BlockPartition,
    set: &PatchSet,
    opts: PatchOptions,
) -> Result<ParameterSet<T>> {
    check_pair(student, teacher, partition)?;
    let m = partition.n_blocks();
    set.check(m)?;

    let mut layers = Vec::with_capacity(partition.patched_size(set));
    for i in 1..=m {
        if set.contains(i) {
            layers.extend(partition.block(i).map(|l| teacher.layers[l - 1].clone()));
        } else {
            layers.push(student.layers[i - 1].clone());
        }
    }

    let emb_src = if set.contains(1) { teacher } else { student };
    let head_src = if set.contains(m) { teacher } else { student };
    let norm_src = match opts.final_norm {
        FinalNormSource::WithHead => head_src,
        FinalNormSource::WithEmbedding => emb_src,
    };
    let same_source = std::ptr::eq(emb_src, head_src);
    let head = match (&head_src.head, same_source) {
        (LmHead::Tied, true) => LmHead::Tied,
        (LmHead::Tied, false) => LmHead::Untied(head_src.embedding.clone()),
        (LmHead::Untied(h), _) => LmHead::Untied(h.clone()),
    };
    let mut config = student.config.with_layers(layers.len());
    config.tie_embeddings = matches!(head, LmHead::Tied);
    Ok(ParameterSet {
        config,
        embedding: emb_src.embedding.clone(),
        positions: emb_src.positions.clone(),
        layers,
        final_norm: norm_src.final_norm.clone(),
        head,
    })
}

/// The `M+1` prefix-patched models along `order`.
pub fn patch_sequence<T: Real>(
    student: &ParameterSet<T>,
    teacher: &ParameterSet<T>,
    partition: &BlockPartition,
    order: &PatchOrder,
) -> Result<Vec<(PatchSet, ParameterSet<T>)>> {
    patch_sequence_with(student, teacher, partition, order, PatchOptions::default())
}

pub fn patch_sequence_with<T: Real>(
    student: &ParameterSet<T>,
    teacher: &ParameterSet<T>,
    partition: &BlockPartition,
    order: &PatchOrder,
    opts: PatchOptions,
) -> Result<Vec<(PatchSet, ParameterSet<T>)>> {
    if order.len() != partition.n_blocks() {
        return Err(Error::Patch(format!(
            "order covers {} blocks, partition has {}",
            order.len(),
            partition.n_blocks()
        )));
    }
    order
        .prefixes()
        .into_iter()
        .map(|set| {
            let model = patch_with(student, teacher, partition, &set, opts)?;
            Ok((set, model))
        })
        .collect()
}
