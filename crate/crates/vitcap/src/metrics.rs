//! Caption evaluation: BLEU-1..4, ROUGE-1/2/L, METEOR, CIDEr, and an
//! exponential-time LCS verifier.
//!
//! Determinism rules: counting uses ordered maps, per-pair statistics
//! are summed in pair order before any division, and every tie-break
//! is explicit (first listed reference, shorter closest length).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate with its reference set, both tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    /// Tokenizes raw caption strings through the standard
    /// normalization.
    pub fn from_captions(candidate: &str, references: &[String]) -> Result<EvalPair> {
        if references.is_empty() {
            return Err(Error::InvalidArgument(
                "evaluation pair needs at least one reference".into(),
            ));
        }
        let split = |s: &str| -> Vec<String> {
            crate::text::normalize_caption(s)
                .split_whitespace()
                .map(str::to_string)
                .collect()
        };
        Ok(EvalPair {
            candidate: split(candidate),
            references: references.iter().map(|r| split(r)).collect(),
        })
    }
}

/// Corpus scores over every implemented metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub n_pairs: usize,
}

/// Corpus BLEU with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// Modified precision per order, 1..=N.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub score: f64,
}

fn validate_pairs(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one pair".into(),
        ));
    }
    for (i, pair) in pairs.iter().enumerate() {
        if pair.references.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "pair {i} has no references"
            )));
        }
        let empty_token = pair
            .candidate
            .iter()
            .chain(pair.references.iter().flatten())
            .any(String::is_empty);
        if empty_token {
            return Err(Error::InvalidArgument(format!(
                "pair {i} contains an empty token"
            )));
        }
    }
    Ok(())
}

/// Contiguous n-grams with multiplicity. Empty when the text is
/// shorter than n.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut counts = BTreeMap::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Candidate length of a reference whose length is closest to the
/// candidate's; ties pick the shorter reference.
fn closest_ref_len(candidate_len: usize, references: &[Vec<String>]) -> usize {
    let mut best = references[0].len();
    for r in &references[1..] {
        let len = r.len();
        let better = len.abs_diff(candidate_len) < best.abs_diff(candidate_len)
            || (len.abs_diff(candidate_len) == best.abs_diff(candidate_len) && len < best);
        if better {
            best = len;
        }
    }
    best
}

/// Corpus-level BLEU-N: modified precisions with reference clipping,
/// uniform weights 1/N, and brevity penalty min(1, e^(1 - r/c)) from
/// summed closest-reference lengths. Any zero precision zeroes the
/// score; a corpus with no candidate tokens at all is an error.
pub fn corpus_bleu(pairs: &[EvalPair], max_n: usize) -> Result<BleuScore> {
    validate_pairs(pairs)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidArgument(format!(
            "bleu order must lie in 1..=4, got {max_n}"
        )));
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    if c == 0 {
        return Err(Error::Numeric(
            "bleu is undefined on an empty candidate corpus".into(),
        ));
    }
    let r: usize = pairs
        .iter()
        .map(|p| closest_ref_len(p.candidate.len(), &p.references))
        .sum();

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut matches = 0usize;
        let mut total = 0usize;
        for pair in pairs {
            let cand = ngram_counts(&pair.candidate, n);
            matches += clip_against_refs(&cand, &pair.references, n);
            total += pair.candidate.len().saturating_sub(n - 1);
        }
        precisions.push(if total == 0 {
            0.0
        } else {
            matches as f64 / total as f64
        });
    }

    let brevity_penalty = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore {
        precisions,
        brevity_penalty,
        score,
    })
}

fn clip_against_refs(cand: &BTreeMap<Vec<String>, usize>, refs: &[Vec<String>], n: usize) -> usize {
    let mut max_ref: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for r in refs {
        for (gram, count) in ngram_counts(r, n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(count);
        }
    }
    cand.iter()
        .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// Sentence-level BLEU-N for one pair, with add-one smoothing of both
/// numerator and denominator for orders >= 2. An empty candidate
/// scores 0.
pub fn sentence_bleu(pair: &EvalPair, max_n: usize) -> Result<f64> {
    validate_pairs(std::slice::from_ref(pair))?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidArgument(format!(
            "bleu order must lie in 1..=4, got {max_n}"
        )));
    }
    let c = pair.candidate.len();
    if c == 0 {
        return Ok(0.0);
    }
    let r = closest_ref_len(c, &pair.references);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(&pair.candidate, n);
        let mut matches = clip_against_refs(&cand, &pair.references, n) as f64;
        let mut total = c.saturating_sub(n - 1) as f64;
        if n >= 2 {
            matches += 1.0;
            total += 1.0;
        }
        if matches == 0.0 {
            return Ok(0.0);
        }
        log_sum += (matches / total).ln();
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Recall-oriented ROUGE-N over the best reference per pair.
///
/// The best reference maximizes that pair's match ratio (ties to the
/// first listed). Pairs where every reference is shorter than n are
/// skipped with a warning; skipping all pairs is an error.
pub fn rouge_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    validate_pairs(pairs)?;
    if !(n == 1 || n == 2) {
        return Err(Error::InvalidArgument(format!(
            "rouge-n supports n in {{1, 2}}, got {n}"
        )));
    }
    let mut matches_total = 0usize;
    let mut ref_total = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let cand = ngram_counts(&pair.candidate, n);
        let mut best: Option<(f64, usize, usize)> = None; // ratio, matches, ref count
        for reference in &pair.references {
            let ref_counts = ngram_counts(reference, n);
            let total: usize = ref_counts.values().sum();
            if total == 0 {
                continue;
            }
            let matched: usize = cand
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            let ratio = matched as f64 / total as f64;
            if best.is_none_or(|(b, _, _)| ratio > b) {
                best = Some((ratio, matched, total));
            }
        }
        match best {
            Some((_, matched, total)) => {
                matches_total += matched;
                ref_total += total;
            }
            None => {
                eprintln!("rouge-{n}: pair {i} has no reference of length >= {n}, skipping");
            }
        }
    }
    if ref_total == 0 {
        return Err(Error::Numeric(format!(
            "rouge-{n} is undefined: every pair was skipped"
        )));
    }
    Ok(matches_total as f64 / ref_total as f64)
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Independent LCS verifier: enumerates every subsequence of `a` and
/// tests it against `b`. Exponential; refuses inputs longer than 12.
pub fn oracle_lcs(a: &[String], b: &[String]) -> Result<usize> {
    if a.len() > 12 || b.len() > 12 {
        return Err(Error::InvalidArgument(format!(
            "oracle lcs is exponential; lengths {} and {} exceed the bound of 12",
            a.len(),
            b.len()
        )));
    }
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let picked: Vec<&String> = (0..a.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &a[i])
            .collect();
        // Subsequence test against b.
        let mut it = b.iter();
        let is_subseq = picked.iter().all(|w| it.any(|y| y == *w));
        if is_subseq {
            best = best.max(picked.len());
        }
    }
    Ok(best)
}

/// ROUGE-L: summed LCS against the best reference over summed best
/// reference lengths. The best reference maximizes the pair's LCS
/// (ties to the first listed).
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    validate_pairs(pairs)?;
    let mut lcs_total = 0usize;
    let mut ref_total = 0usize;
    for pair in pairs {
        let mut best_lcs = 0;
        let mut best_len = pair.references[0].len();
        let mut first = true;
        for reference in &pair.references {
            let l = lcs_length(&pair.candidate, reference);
            if first || l > best_lcs {
                best_lcs = l;
                best_len = reference.len();
                first = false;
            }
        }
        lcs_total += best_lcs;
        ref_total += best_len;
    }
    if ref_total == 0 {
        return Err(Error::Numeric(
            "rouge-l is undefined: all references are empty".into(),
        ));
    }
    Ok(lcs_total as f64 / ref_total as f64)
}

/// Maximum number of unigram matches between two texts.
fn unigram_match_count(cand: &[String], reference: &[String]) -> usize {
    let c = ngram_counts(cand, 1);
    let r = ngram_counts(reference, 1);
    c.iter()
        .map(|(w, &n)| n.min(r.get(w).copied().unwrap_or(0)))
        .sum()
}

/// Number of chunks in an alignment given as (candidate, reference)
/// index pairs: runs that advance both sides by one merge into a
/// single chunk.
fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(c, r) in &sorted {
        let extends = prev == Some((c.wrapping_sub(1), r.wrapping_sub(1))) && c > 0 && r > 0;
        if !extends {
            chunks += 1;
        }
        prev = Some((c, r));
    }
    chunks
}

/// Exact minimum chunk count over all maximum alignments, by
/// depth-first search with pruning. Exponential in principle; callers
/// cap m.
fn min_chunks_exact(cand: &[String], reference: &[String], m: usize) -> usize {
    struct Search<'a> {
        cand: &'a [String],
        reference: &'a [String],
        m: usize,
        best: usize,
    }
    impl Search<'_> {
        /// Upper bound on matches still reachable from ci with the
        /// given used-reference mask.
        fn feasible(&self, ci: usize, used: u32) -> usize {
            let mut remaining_ref: BTreeMap<&str, usize> = BTreeMap::new();
            for (j, w) in self.reference.iter().enumerate() {
                if used & (1 << j) == 0 {
                    *remaining_ref.entry(w.as_str()).or_insert(0) += 1;
                }
            }
            let mut remaining_cand: BTreeMap<&str, usize> = BTreeMap::new();
            for w in &self.cand[ci..] {
                *remaining_cand.entry(w.as_str()).or_insert(0) += 1;
            }
            remaining_cand
                .iter()
                .map(|(w, &c)| c.min(remaining_ref.get(w).copied().unwrap_or(0)))
                .sum()
        }

        fn dfs(
            &mut self,
            ci: usize,
            used: u32,
            matched: usize,
            last_r: Option<usize>,
            chunks: usize,
        ) {
            if matched == self.m {
                self.best = self.best.min(chunks);
                return;
            }
            if chunks >= self.best || matched + self.feasible(ci, used) < self.m {
                return;
            }
            // Prefer the run-extending reference position first.
            let word = &self.cand[ci];
            let mut order: Vec<usize> = (0..self.reference.len())
                .filter(|&j| used & (1 << j) == 0 && &self.reference[j] == word)
                .collect();
            if let Some(lr) = last_r {
                order.sort_by_key(|&j| (j != lr + 1, j));
            }
            for j in order {
                let extends = last_r == Some(j.wrapping_sub(1)) && j > 0;
                self.dfs(
                    ci + 1,
                    used | (1 << j),
                    matched + 1,
                    Some(j),
                    chunks + usize::from(!extends),
                );
            }
            self.dfs(ci + 1, used, matched, None, chunks);
        }
    }
    let mut search = Search {
        cand,
        reference,
        m,
        best: m,
    };
    search.dfs(0, 0, 0, None, 0);
    search.best
}

/// Greedy chunk heuristic for large m: repeatedly match the longest
/// remaining common run, then count chunks of the final alignment.
fn min_chunks_greedy(cand: &[String], reference: &[String]) -> usize {
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<(usize, usize, usize)> = None; // len, ci, rj
        for ci in 0..cand.len() {
            for rj in 0..reference.len() {
                let mut len = 0;
                while ci + len < cand.len()
                    && rj + len < reference.len()
                    && !cand_used[ci + len]
                    && !ref_used[rj + len]
                    && cand[ci + len] == reference[rj + len]
                {
                    len += 1;
                }
                if len > 0 && best.is_none_or(|(l, ..)| len > l) {
                    best = Some((len, ci, rj));
                }
            }
        }
        match best {
            Some((len, ci, rj)) => {
                for k in 0..len {
                    cand_used[ci + k] = true;
                    ref_used[rj + k] = true;
                    pairs.push((ci + k, rj + k));
                }
            }
            None => break,
        }
    }
    chunk_count(&pairs)
}

/// METEOR score of one candidate against one reference.
fn meteor_single(cand: &[String], reference: &[String]) -> f64 {
    let m = unigram_match_count(cand, reference);
    if m == 0 {
        return 0.0;
    }
    // The exact chunk search is exponential; past 20 matches a greedy
    // longest-run alignment stands in.
    let chunks = if m <= 20 {
        min_chunks_exact(cand, reference, m)
    } else {
        min_chunks_greedy(cand, reference)
    };
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Exact-match METEOR, averaged over pairs; each pair takes its
/// best-scoring reference.
pub fn meteor(pairs: &[EvalPair]) -> Result<f64> {
    validate_pairs(pairs)?;
    let mut total = 0.0;
    for pair in pairs {
        let mut best = 0.0;
        for reference in &pair.references {
            let s = meteor_single(&pair.candidate, reference);
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    Ok(total / pairs.len() as f64)
}

/// Plain CIDEr on the x10 scale.
///
/// For each order n in 1..=4, texts become tf-idf vectors with
/// idf(g) = ln(M / max(1, df(g))), df counting pairs whose reference
/// set contains g. A pair scores the mean cosine similarity between
/// the candidate and each distinct reference (0 whenever a norm
/// vanishes); references act as a set, so repeating one changes
/// nothing.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    validate_pairs(pairs)?;
    let m_total = pairs.len() as f64;
    let distinct_refs: Vec<Vec<&Vec<String>>> = pairs
        .iter()
        .map(|pair| {
            let mut seen: Vec<&Vec<String>> = Vec::new();
            for reference in &pair.references {
                if !seen.contains(&reference) {
                    seen.push(reference);
                }
            }
            seen
        })
        .collect();
    let mut order_scores = Vec::with_capacity(4);
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for pair in pairs {
            let mut present: BTreeMap<Vec<String>, ()> = BTreeMap::new();
            for reference in &pair.references {
                for gram in ngram_counts(reference, n).into_keys() {
                    present.insert(gram, ());
                }
            }
            for gram in present.into_keys() {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        let idf = |gram: &Vec<String>| -> f64 {
            let d = df.get(gram).copied().unwrap_or(0).max(1);
            (m_total / d as f64).ln()
        };

        let weighted = |tokens: &[String]| -> BTreeMap<Vec<String>, f64> {
            ngram_counts(tokens, n)
                .into_iter()
                .map(|(gram, count)| {
                    let w = count as f64 * idf(&gram);
                    (gram, w)
                })
                .collect()
        };

        let mut total = 0.0;
        for (pair, refs) in pairs.iter().zip(&distinct_refs) {
            let cand_vec = weighted(&pair.candidate);
            let cand_norm = cand_vec.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut pair_score = 0.0;
            for reference in refs {
                let ref_vec = weighted(reference);
                let ref_norm = ref_vec.values().map(|v| v * v).sum::<f64>().sqrt();
                if cand_norm == 0.0 || ref_norm == 0.0 {
                    continue;
                }
                let dot: f64 = cand_vec
                    .iter()
                    .filter_map(|(g, v)| ref_vec.get(g).map(|w| v * w))
                    .sum();
                pair_score += dot / (cand_norm * ref_norm);
            }
            total += pair_score / refs.len() as f64;
        }
        order_scores.push(total / m_total);
    }
    Ok(10.0 * order_scores.iter().sum::<f64>() / order_scores.len() as f64)
}

/// All metrics over one corpus.
pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<EvalReport> {
    validate_pairs(pairs)?;
    Ok(EvalReport {
        bleu1: corpus_bleu(pairs, 1)?.score,
        bleu2: corpus_bleu(pairs, 2)?.score,
        bleu3: corpus_bleu(pairs, 3)?.score,
        bleu4: corpus_bleu(pairs, 4)?.score,
        meteor: meteor(pairs)?,
        rouge1: rouge_n(pairs, 1)?,
        rouge2: rouge_n(pairs, 2)?,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
        n_pairs: pairs.len(),
    })
}
