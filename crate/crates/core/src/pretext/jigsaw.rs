use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::patches::{embed_patches, PatchGrid, NUM_PATCHES};
use crate::error::{Error, Result};
use crate::model::{Backbone, LinearHead};
use crate::ndgrad::{Scalar, Tensor};

/// Largest patch count whose full permutation space we enumerate.
pub const MAX_ENUMERABLE: usize = 10;

/// Positions at which two orderings differ.
pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn factorial(n: usize) -> Option<u64> {
    (1..=n as u64).try_fold(1u64, |acc, k| acc.checked_mul(k))
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n && p.iter().all(|&v| v < n && !std::mem::replace(&mut seen[v], true))
}

/// An ordered set of maximally spread orderings of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    pub n: usize,
    pub perms: Vec<Vec<usize>>,
    /// Seed for the random first ordering, when one was drawn.
    pub seed: Option<u64>,
}

impl PermutationSet {
    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn get(&self, p: usize) -> Result<&[usize]> {
        self.perms
            .get(p)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Index(format!("permutation {p} of a {}-permutation set", self.perms.len())))
    }

    pub fn mean_pairwise_hamming(&self) -> f64 {
        mean_pairwise_hamming(&self.perms)
    }

    /// Text form: a `# n=.. count=.. seed=..` header, then one
    /// space-separated permutation per line.
    pub fn to_text(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let mut out = format!("# n={} count={} seed={}\n", self.n, self.perms.len(), seed);
        for p in &self.perms {
            let line: Vec<String> = p.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Integrity("empty permutation file".into()))?;
        let field = |key: &str| -> Option<&str> {
            header
                .trim_start_matches('#')
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            field(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Integrity(format!("permutation header lacks `{key}`: {header}")))
        };
        let n = parse_usize("n")?;
        let count = parse_usize("count")?;
        let seed = field("seed").and_then(|v| v.parse().ok());
        let mut perms = Vec::with_capacity(count);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let p: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Integrity(format!("bad permutation line `{line}`"))))
                .collect::<Result<_>>()?;
            if !is_permutation(&p, n) {
                return Err(Error::Integrity(format!("`{line}` is not a permutation of 0..{n}")));
            }
            perms.push(p);
        }
        if perms.len() != count {
            return Err(Error::Integrity(format!("header promises {count} permutations, found {}", perms.len())));
        }
        Ok(Self { n, perms, seed })
    }
}

pub fn mean_pairwise_hamming(perms: &[Vec<usize>]) -> f64 {
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..perms.len() {
        for j in i + 1..perms.len() {
            total += hamming(&perms[i], &perms[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total as f64 / pairs as f64
    }
}

/// All orderings of `0..n` in lexicographic order, flattened.
fn lexicographic_permutations(n: usize) -> Vec<u8> {
    let total = factorial(n).unwrap_or(0) as usize;
    let mut out = Vec::with_capacity(total * n);
    let mut cur: Vec<u8> = (0..n as u8).collect();
    loop {
        out.extend_from_slice(&cur);
        // next permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).expect("successor exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Greedy max-average-Hamming selection starting from a seeded random
/// ordering.
pub fn generate_permutation_set(n_patches: usize, count: usize, seed: u64) -> Result<PermutationSet> {
    let mut initial: Vec<usize> = (0..n_patches).collect();
    initial.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut set = greedy_permutation_set(n_patches, count, &initial)?;
    set.seed = Some(seed);
    Ok(set)
}

/// Starting from `initial`, repeatedly adds the unused ordering with the
/// largest mean Hamming distance to those already chosen. Ties go to the
/// lexicographically smallest ordering.
pub fn greedy_permutation_set(n_patches: usize, count: usize, initial: &[usize]) -> Result<PermutationSet> {
    let capacity = factorial(n_patches);
    if capacity.is_none_or(|c| count as u64 > c) {
        return Err(Error::Capacity(format!("{count} permutations requested but {n_patches}! is smaller")));
    }
    if n_patches > MAX_ENUMERABLE {
        return Err(Error::Capacity(format!(
            "permutation search enumerates n!; n={n_patches} exceeds {MAX_ENUMERABLE}"
        )));
    }
    if !is_permutation(initial, n_patches) {
        return Err(Error::Contract(format!("{initial:?} is not a permutation of 0..{n_patches}")));
    }
    let mut perms = Vec::with_capacity(count);
    if count == 0 {
        return Ok(PermutationSet { n: n_patches, perms, seed: None });
    }
    let all = lexicographic_permutations(n_patches);
    let total = all.len() / n_patches;
    let mut used = vec![false; total];
    // Summed distance to the chosen set; the mean has the same argmax.
    let mut dist = vec![0u32; total];
    let mut chosen: Vec<u8> = initial.iter().map(|&v| v as u8).collect();
    let first = all
        .chunks(n_patches)
        .position(|p| p == chosen.as_slice())
        .expect("initial ordering is enumerated");
    used[first] = true;
    perms.push(initial.to_vec());
    while perms.len() < count {
        for (d, cand) in dist.iter_mut().zip(all.chunks(n_patches)) {
            *d += cand.iter().zip(&chosen).filter(|(a, b)| a != b).count() as u32;
        }
        let mut best: Option<usize> = None;
        for (i, &d) in dist.iter().enumerate() {
            if !used[i] && best.is_none_or(|b| d > dist[b]) {
                best = Some(i);
            }
        }
        let best = best.expect("count ≤ n! leaves a candidate");
        used[best] = true;
        chosen = all[best * n_patches..(best + 1) * n_patches].to_vec();
        perms.push(chosen.iter().map(|&v| v as usize).collect());
    }
    Ok(PermutationSet { n: n_patches, perms, seed: None })
}

/// Row indices that lay out each image's patch embeddings in the order
/// given by its permutation: slot `i` receives patch `perm[i]`.
pub fn permuted_rows(perms: &[&[usize]]) -> Vec<usize> {
    perms
        .iter()
        .enumerate()
        .flat_map(|(b, perm)| perm.iter().map(move |&src| b * NUM_PATCHES + src))
        .collect()
}

/// Jigsaw inputs `[rows × 9d]` and targets from patch embeddings
/// (`[9·batch × d]`). `choices[b]` lists the permutation indices used for
/// image `b`; each yields one row.
pub fn jigsaw_inputs<T: Scalar>(
    embeddings: &Tensor<T>,
    permset: &PermutationSet,
    choices: &[Vec<usize>],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [rows, d] = *embeddings.shape() else {
        return Err(Error::Dimension(format!("patch embeddings must be a matrix, got {:?}", embeddings.shape())));
    };
    if rows != choices.len() * NUM_PATCHES || permset.n != NUM_PATCHES {
        return Err(Error::Dimension(format!(
            "{rows} patch rows for {} images / permutations over {}",
            choices.len(),
            permset.n
        )));
    }
    let mut index = Vec::new();
    let mut targets = Vec::new();
    for (b, ps) in choices.iter().enumerate() {
        for &p in ps {
            let perm = permset.get(p)?;
            index.extend(perm.iter().map(|&src| b * NUM_PATCHES + src));
            targets.push(p);
        }
    }
    let arranged = embeddings.gather_rows(&index)?;
    let inputs = arranged.reshape(&[targets.len(), NUM_PATCHES * d])?;
    Ok((inputs, targets))
}

/// One permutation index per image, or all of them when `all_perms`.
pub fn sample_permutation_choices(batch: usize, permset: &PermutationSet, all_perms: bool, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| {
            if all_perms {
                (0..permset.len()).collect()
            } else {
                vec![rng.gen_range(0..permset.len())]
            }
        })
        .collect()
}

pub fn jigsaw_loss_from_embeddings<T: Scalar>(
    embeddings: &Tensor<T>,
    permset: &PermutationSet,
    head: &LinearHead<T>,
    choices: &[Vec<usize>],
) -> Result<Tensor<T>> {
    let (inputs, targets) = jigsaw_inputs(embeddings, permset, choices)?;
    head.forward(&inputs)?.softmax_cross_entropy(&targets)
}

/// Mean cross-entropy of predicting which set member shuffled each image's
/// patches.
pub fn jigsaw_loss<T: Scalar>(
    grids: &[PatchGrid<T>],
    permset: &PermutationSet,
    backbone: &Backbone<T>,
    head: &LinearHead<T>,
    all_perms: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let choices = sample_permutation_choices(grids.len(), permset, all_perms, rng);
    jigsaw_loss_from_embeddings(&embed_patches(grids, backbone)?, permset, head, &choices)
}
