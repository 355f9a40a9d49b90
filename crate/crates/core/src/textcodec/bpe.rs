//! Greedy pair-merge training and merge application.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::vocab::Vocab;

/// Merge table: `(left, right) -> (rank, merged id)`.
pub(crate) type MergeTable = HashMap<(u32, u32), (usize, u32)>;

/// Learns merges over `segments` (already mapped to base-symbol ids, with
/// counts) until the vocabulary holds `vocab_size` tokens or no pair occurs
/// twice. The most frequent pair wins; ties go to the lexicographically
/// smallest `(left, right)` string pair. Returns the merges as id pairs in
/// rank order; `vocab` is extended in place.
// TODO: incremental pair counting; a full recount per merge is fine for
// desk-scale corpora but quadratic-ish on WritingPrompts-sized input.
pub(crate) fn learn_merges(
    vocab: &mut Vocab,
    mut segments: Vec<(Vec<u32>, usize)>,
    vocab_size: usize,
) -> Vec<(u32, u32)> {
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (seq, n) in &segments {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(pair, c)| c >= 2 && !creates_reserved(vocab, pair))
            .max_by(|&(pa, ca), &(pb, cb)| {
                ca.cmp(&cb).then_with(|| pair_order(vocab, pb, pa))
            });
        let Some((pair, _)) = best else { break };

        let merged = format!(
            "{}{}",
            vocab.token(pair.0).unwrap(),
            vocab.token(pair.1).unwrap()
        );
        let id = match vocab.id(&merged) {
            Some(existing) => existing,
            None => vocab.push(&merged).expect("checked absent"),
        };
        for (seq, _) in segments.iter_mut() {
            merge_in_place(seq, pair, id);
        }
        merges.push(pair);
    }
    merges
}

fn creates_reserved(vocab: &Vocab, (a, b): (u32, u32)) -> bool {
    let merged = format!("{}{}", vocab.token(a).unwrap(), vocab.token(b).unwrap());
    Vocab::is_reserved_string(&merged)
}

fn pair_order(vocab: &Vocab, a: (u32, u32), b: (u32, u32)) -> Ordering {
    let key = |p: (u32, u32)| (vocab.token(p.0).unwrap(), vocab.token(p.1).unwrap());
    key(a).cmp(&key(b))
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
pub(crate) fn merge_in_place(seq: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    if seq.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Applies learned merges to a base-symbol sequence, lowest rank first,
/// reproducing the segmentation seen during training.
pub(crate) fn apply_merges(mut seq: Vec<u32>, table: &MergeTable) -> Vec<u32> {
    loop {
        let best = seq
            .windows(2)
            .filter_map(|w| table.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
            .min_by_key(|&(rank, _, _)| rank);
        match best {
            Some((_, pair, id)) => merge_in_place(&mut seq, pair, id),
            None => return seq,
        }
    }
}
