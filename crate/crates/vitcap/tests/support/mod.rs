//! Brute-force re-implementations of every caption metric, written
//! straight from the definitions with none of the library's helpers,
//! plus the seeded corpus generator the integration tests share.
//!
//! Everything here favors obviousness over speed: hash maps instead of
//! ordered maps, recursion instead of dynamic programming, and outright
//! enumeration of METEOR alignments instead of a pruned search. The
//! point is that a disagreement with the library implicates the
//! library, not a shared helper.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::Rng as _;
use vitcap::metrics::EvalPair;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn pair(cand: &str, refs: &[&str]) -> EvalPair {
    EvalPair {
        candidate: toks(cand),
        references: refs.iter().map(|r| toks(r)).collect(),
    }
}

/// Seeded random corpus: `n` pairs over a `vocab`-word vocabulary,
/// candidate and reference lengths drawn from 1..=max_len, one to
/// three references per pair.
pub fn random_pairs(seed: u64, n: usize, vocab: usize, max_len: usize) -> Vec<EvalPair> {
    let mut rng = vitcap::rng::seeded(seed);
    let text = |rng: &mut vitcap::rng::Rng| -> Vec<String> {
        let len = rng.gen_range(1..=max_len);
        (0..len)
            .map(|_| format!("w{:02}", rng.gen_range(0..vocab)))
            .collect()
    };
    (0..n)
        .map(|_| {
            let candidate = text(&mut rng);
            let n_refs = rng.gen_range(1..=3usize);
            let references = (0..n_refs).map(|_| text(&mut rng)).collect();
            EvalPair {
                candidate,
                references,
            }
        })
        .collect()
}

/// n-gram multiset of a text.
fn grams(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if n >= 1 && tokens.len() >= n {
        for start in 0..=(tokens.len() - n) {
            *out.entry(tokens[start..start + n].to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Candidate n-gram count clipped by the most times any single
/// reference repeats the gram.
fn clipped_matches(cand: &[String], refs: &[Vec<String>], n: usize) -> usize {
    let mut matched = 0;
    for (gram, count) in grams(cand, n) {
        let cap = refs
            .iter()
            .map(|r| grams(r, n).get(&gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += count.min(cap);
    }
    matched
}

/// Length of the reference closest in length to the candidate; a tie
/// goes to the shorter reference.
fn closest_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    let mut best = refs[0].len();
    for r in refs.iter().skip(1) {
        let d_new = r.len().abs_diff(cand_len);
        let d_old = best.abs_diff(cand_len);
        if d_new < d_old || (d_new == d_old && r.len() < best) {
            best = r.len();
        }
    }
    best
}

/// Corpus BLEU pieces: per-order precisions, brevity penalty, score.
pub fn corpus_bleu(pairs: &[EvalPair], max_n: usize) -> (Vec<f64>, f64, f64) {
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let r: usize = pairs
        .iter()
        .map(|p| closest_len(p.candidate.len(), &p.references))
        .sum();
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let mut matched = 0;
        let mut total = 0;
        for p in pairs {
            matched += clipped_matches(&p.candidate, &p.references, n);
            total += p.candidate.len().saturating_sub(n - 1);
        }
        precisions.push(if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        });
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    (precisions, bp, score)
}

/// Sentence BLEU with add-one smoothing of numerator and denominator
/// for every order above 1.
pub fn sentence_bleu(p: &EvalPair, max_n: usize) -> f64 {
    let c = p.candidate.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = clipped_matches(&p.candidate, &p.references, n) as f64;
        let mut total = c.saturating_sub(n - 1) as f64;
        if n >= 2 {
            matched += 1.0;
            total += 1.0;
        }
        if matched == 0.0 {
            return 0.0;
        }
        log_sum += (matched / total).ln();
    }
    let r = closest_len(c, &p.references);
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / max_n as f64).exp()
}

/// ROUGE-N recall against each pair's best reference by match ratio
/// (first listed wins ties), aggregated as summed matches over summed
/// reference gram counts. References shorter than n are ignored; a
/// pair with no usable reference is dropped; `None` when every pair
/// drops.
pub fn rouge_n(pairs: &[EvalPair], n: usize) -> Option<f64> {
    let mut matched_sum = 0;
    let mut ref_sum = 0;
    for p in pairs {
        let cand = grams(&p.candidate, n);
        let mut best: Option<(f64, usize, usize)> = None;
        for r in &p.references {
            let rg = grams(r, n);
            let total: usize = rg.values().sum();
            if total == 0 {
                continue;
            }
            let matched: usize = cand
                .iter()
                .map(|(g, &c)| c.min(rg.get(g).copied().unwrap_or(0)))
                .sum();
            let ratio = matched as f64 / total as f64;
            if best.is_none_or(|(b, _, _)| ratio > b) {
                best = Some((ratio, matched, total));
            }
        }
        if let Some((_, matched, total)) = best {
            matched_sum += matched;
            ref_sum += total;
        }
    }
    (ref_sum > 0).then(|| matched_sum as f64 / ref_sum as f64)
}

/// LCS by enumerating every subsequence of `a` and testing it against
/// `b`. Exponential by construction; callers keep lengths small.
pub fn exhaustive_lcs(a: &[String], b: &[String]) -> usize {
    assert!(
        a.len() <= 16,
        "exhaustive LCS is exponential in the first text"
    );
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let mut b_iter = 0;
        let mut ok = true;
        let mut len = 0;
        for (i, word) in a.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            len += 1;
            loop {
                if b_iter == b.len() {
                    ok = false;
                    break;
                }
                b_iter += 1;
                if &b[b_iter - 1] == word {
                    break;
                }
            }
            if !ok {
                break;
            }
        }
        if ok {
            best = best.max(len);
        }
    }
    best
}

/// ROUGE-L: summed best-reference LCS over summed best-reference
/// lengths; the best reference maximizes the LCS (first listed wins
/// ties).
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    let mut lcs_sum = 0;
    let mut len_sum = 0;
    for p in pairs {
        let mut best_lcs = exhaustive_lcs(&p.candidate, &p.references[0]);
        let mut best_len = p.references[0].len();
        for r in p.references.iter().skip(1) {
            let l = exhaustive_lcs(&p.candidate, r);
            if l > best_lcs {
                best_lcs = l;
                best_len = r.len();
            }
        }
        lcs_sum += best_lcs;
        len_sum += best_len;
    }
    lcs_sum as f64 / len_sum as f64
}

/// Every injective maximum-cardinality unigram alignment between a
/// candidate and a reference, enumerated word by word: for each shared
/// word choose the candidate slots, the reference slots, and the
/// pairing between them. Returns the smallest chunk count seen.
fn min_chunks_by_enumeration(cand: &[String], reference: &[String]) -> usize {
    let mut cand_slots: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, w) in cand.iter().enumerate() {
        cand_slots.entry(w).or_default().push(i);
    }
    let mut ref_slots: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_slots.entry(w).or_default().push(j);
    }
    let mut shared: Vec<&str> = cand_slots
        .keys()
        .filter(|w| ref_slots.contains_key(*w))
        .copied()
        .collect();
    shared.sort_unstable();

    // Alignments for one word: each way to pick k candidate slots, k
    // reference slots, and a bijection between them.
    fn word_alignments(cs: &[usize], rs: &[usize]) -> Vec<Vec<(usize, usize)>> {
        let k = cs.len().min(rs.len());
        let mut out = Vec::new();
        for c_pick in subsets(cs, k) {
            for r_arrangement in arrangements(rs, k) {
                out.push(c_pick.iter().copied().zip(r_arrangement).collect());
            }
        }
        out
    }
    fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        if items.len() < k {
            return Vec::new();
        }
        let mut out = Vec::new();
        for rest in subsets(&items[1..], k - 1) {
            let mut v = vec![items[0]];
            v.extend(rest);
            out.push(v);
        }
        out.extend(subsets(&items[1..], k));
        out
    }
    fn arrangements(items: &[usize], k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for (i, &first) in items.iter().enumerate() {
            let mut rest: Vec<usize> = items.to_vec();
            rest.remove(i);
            for mut tail in arrangements(&rest, k - 1) {
                tail.insert(0, first);
                out.push(tail);
            }
        }
        out
    }

    let per_word: Vec<Vec<Vec<(usize, usize)>>> = shared
        .iter()
        .map(|w| word_alignments(&cand_slots[w], &ref_slots[w]))
        .collect();
    let combinations: u64 = per_word.iter().map(|v| v.len() as u64).product();
    assert!(
        combinations <= 5_000_000,
        "alignment enumeration too large ({combinations}); shrink the inputs"
    );

    fn chunks_of(mut alignment: Vec<(usize, usize)>) -> usize {
        alignment.sort_unstable();
        let mut chunks = 0;
        for (i, &(c, r)) in alignment.iter().enumerate() {
            let extends = i > 0 && alignment[i - 1] == (c.wrapping_sub(1), r.wrapping_sub(1));
            if !extends {
                chunks += 1;
            }
        }
        chunks
    }

    let mut best = usize::MAX;
    let walk = |choices: &mut dyn FnMut(Vec<(usize, usize)>)| {
        fn rec(
            per_word: &[Vec<Vec<(usize, usize)>>],
            acc: &mut Vec<(usize, usize)>,
            sink: &mut dyn FnMut(Vec<(usize, usize)>),
        ) {
            match per_word.first() {
                None => sink(acc.clone()),
                Some(options) => {
                    for opt in options {
                        acc.extend(opt.iter().copied());
                        rec(&per_word[1..], acc, sink);
                        acc.truncate(acc.len() - opt.len());
                    }
                }
            }
        }
        rec(&per_word, &mut Vec::new(), choices);
    };
    walk(&mut |alignment| best = best.min(chunks_of(alignment)));
    best
}

/// METEOR of a single candidate/reference pairing.
fn meteor_one(cand: &[String], reference: &[String]) -> f64 {
    let cg = grams(cand, 1);
    let rg = grams(reference, 1);
    let m: usize = cg
        .iter()
        .map(|(w, &c)| c.min(rg.get(w).copied().unwrap_or(0)))
        .sum();
    if m == 0 {
        return 0.0;
    }
    let chunks = min_chunks_by_enumeration(cand, reference);
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Corpus METEOR: each pair scores its best reference; pairs average.
pub fn meteor(pairs: &[EvalPair]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| meteor_one(&p.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    total / pairs.len() as f64
}

/// CIDEr on the x10 scale: orders 1..=4, idf from pair-level reference
/// document frequency, candidate scored by mean cosine against each
/// distinct reference.
pub fn cider(pairs: &[EvalPair]) -> f64 {
    let m = pairs.len() as f64;
    let mut order_total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for p in pairs {
            let mut present: HashSet<Vec<String>> = HashSet::new();
            for r in &p.references {
                present.extend(grams(r, n).into_keys());
            }
            for g in present {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let tfidf = |text: &[String]| -> HashMap<Vec<String>, f64> {
            grams(text, n)
                .into_iter()
                .map(|(g, count)| {
                    let d = df.get(&g).copied().unwrap_or(0).max(1);
                    let w = count as f64 * (m / d as f64).ln();
                    (g, w)
                })
                .collect()
        };
        let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();

        let mut corpus = 0.0;
        for p in pairs {
            let mut distinct: Vec<&Vec<String>> = Vec::new();
            for r in &p.references {
                if !distinct.contains(&r) {
                    distinct.push(r);
                }
            }
            let cvec = tfidf(&p.candidate);
            let cnorm = norm(&cvec);
            let mut pair_total = 0.0;
            for r in &distinct {
                let rvec = tfidf(r);
                let rnorm = norm(&rvec);
                if cnorm == 0.0 || rnorm == 0.0 {
                    continue;
                }
                let dot: f64 = cvec
                    .iter()
                    .filter_map(|(g, v)| rvec.get(g).map(|w| v * w))
                    .sum();
                pair_total += dot / (cnorm * rnorm);
            }
            corpus += pair_total / distinct.len() as f64;
        }
        order_total += corpus / m;
    }
    10.0 * order_total / 4.0
}
