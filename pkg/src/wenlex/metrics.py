"""Evaluation protocol: evidence agreement (macro F1), occlusion-based
deletion checks, rule-based simulatability, diversity (self-BLEU and a
retrieval attack), embedding-overlap plausibility scoring, exact ROC AUC,
and readability grading."""

from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

from .domain import NEG, UngroundableError, ground_sentence, oracle_label, proxy_read
from .models import classify
from .tensor import Tensor


@dataclass
class MetricsReport:
    """One evaluated run. Percent-style fields live in [0, 100]
    (flip_pct, y_given_*, self_bleu); clev_macro_f1, delta_p, cxbs,
    retrieval_distance and auc live in [0, 1]; readability is a school
    grade level. Absent metrics are None, never zero."""

    clev_macro_f1: float = None
    flip_pct: float = None
    flip_pct_random: float = None
    delta_p: float = None
    ungroundable: int = 0
    y_given_img: float = None
    y_given_nle: float = None
    y_given_img_nle: float = None
    self_bleu: float = None
    retrieval_distance: float = None
    cxbs: float = None
    auc: float = None
    readability_gen: float = None
    readability_db: float = None
    nle_count_total: int = 0
    nle_count_correct: int = 0

    def as_row(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _binarize(states):
    return tuple(1 if s != NEG else 0 for s in states)


def _f1(tp, fp, fn):
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0  # label never claimed nor expected: vacuously perfect
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def clev_score(schema, explanations):
    """Macro F1 of evidence extracted from decoded sentences against the
    MBE's predicted evidence states, over all generated explanations.

    Ground-truth evidence is never read here: a sentence matching the GT but
    not the prediction scores as wrong.
    """
    n_diag = len(schema.diagnosis_labels)
    counts = {lb: [0, 0, 0] for lb in schema.evidence_labels}  # tp, fp, fn
    for e in explanations:
        _, evid = oracle_label(schema, e.tokens)
        got = _binarize(evid)
        want = _binarize(e.prediction.states[n_diag:])
        for lb, g, w in zip(schema.evidence_labels, got, want):
            if g and w:
                counts[lb][0] += 1
            elif g and not w:
                counts[lb][1] += 1
            elif w and not g:
                counts[lb][2] += 1
    return float(np.mean([_f1(*counts[lb]) for lb in schema.evidence_labels]))


def evidence_confusion(schema, explanations):
    """Per evidence label TP/FP/FN/TN over non-negative-vs-negative binarization."""
    n_diag = len(schema.diagnosis_labels)
    table = {lb: {"tp": 0, "fp": 0, "fn": 0, "tn": 0} for lb in schema.evidence_labels}
    for e in explanations:
        _, evid = oracle_label(schema, e.tokens)
        got = _binarize(evid)
        want = _binarize(e.prediction.states[n_diag:])
        for lb, g, w in zip(schema.evidence_labels, got, want):
            key = "tp" if g and w else "fp" if g else "fn" if w else "tn"
            table[lb][key] += 1
    return table


def _rerender(schema, explanation):
    from .domain import render_image

    return render_image(schema, explanation.target, explanation.image_seed).pixels


def deletion_metric(schema, explanations, frozen_mbe, fill_value, rng=None):
    """Occlude the quadrant each explanation points to and measure decision
    flips and probability change for the explained diagnosis.

    Returns (flip_pct, mean delta_p, flip_pct of a random-quadrant baseline,
    ungroundable count). Ungroundable sentences count as non-flips with
    delta_p 0 and are reported separately.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    flips, deltas, rand_flips, ungroundable = 0, [], 0, 0
    for e in explanations:
        pixels = _rerender(schema, e)
        d_idx = schema.label_index(e.diagnosis)
        base_probs = np.array(e.prediction.probs[d_idx])
        base_class = int(np.argmax(base_probs))
        base_p = base_probs[1] + base_probs[2]
        try:
            mask, _q = ground_sentence(schema, e.tokens)
        except UngroundableError:
            ungroundable += 1
            deltas.append(0.0)
            rand_flips += _masked_flip(schema, frozen_mbe, pixels,
                                       schema.quadrant_mask(int(rng.integers(4))),
                                       fill_value, d_idx, base_class)[0]
            continue
        flip, delta = _masked_flip(schema, frozen_mbe, pixels, mask, fill_value,
                                   d_idx, base_class, base_p)
        flips += flip
        deltas.append(delta)
        rand_flips += _masked_flip(schema, frozen_mbe, pixels,
                                   schema.quadrant_mask(int(rng.integers(4))),
                                   fill_value, d_idx, base_class)[0]
    n = len(explanations)
    if n == 0:
        return None, None, None, 0
    return (100.0 * flips / n, float(np.mean(deltas)), 100.0 * rand_flips / n,
            ungroundable)


def _masked_flip(schema, frozen_mbe, pixels, mask, fill_value, d_idx,
                 base_class, base_p=None):
    masked = pixels.copy()
    masked[:, mask] = fill_value
    probs, _ = classify(frozen_mbe, Tensor(masked[None]))
    triple = probs.data[0, d_idx]
    new_class = int(np.argmax(triple))
    flip = int(new_class != base_class)
    if base_p is None:
        return flip, 0.0
    delta = abs(base_p - (triple[1] + triple[2]))
    return flip, float(delta)


def simulatability(schema, explanations):
    """Accuracy of the rule-based proxy reader at recovering the MBE's class
    for the explained diagnosis, from image / sentence / both. Percentages;
    None when there is nothing to evaluate."""
    if not explanations:
        return None, None, None
    img_ok, nle_ok, both_ok = 0, 0, 0
    for e in explanations:
        pixels = _rerender(schema, e)
        d_idx = schema.label_index(e.diagnosis)
        want = e.prediction.states[d_idx]
        img_ok += proxy_read(schema, image_pixels=pixels).states[d_idx] == want
        nle_ok += proxy_read(schema, tokens=e.tokens).states[d_idx] == want
        both_ok += proxy_read(schema, tokens=e.tokens,
                              image_pixels=pixels).states[d_idx] == want
    n = len(explanations)
    return 100.0 * img_ok / n, 100.0 * nle_ok / n, 100.0 * both_ok / n


# ---------------------------------------------------------------------------
# diversity

def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, references):
    """BLEU-4 with max-reference clipping, additive smoothing for zero
    precisions (1 / (2 * candidate n-gram count)), and the closest-length
    brevity penalty."""
    if not references:
        raise ValueError("bleu4 needs at least one reference")
    c_len = len(candidate)
    ref_lens = sorted(len(r) for r in references)
    r_len = min(ref_lens, key=lambda r: (abs(r - c_len), r))
    log_prec = 0.0
    for n in range(1, 5):
        cand = _ngram_counts(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0  # candidate shorter than n tokens
        clipped = 0
        max_ref = Counter()
        for ref in references:
            for gram, cnt in _ngram_counts(ref, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        for gram, cnt in cand.items():
            clipped += min(cnt, max_ref[gram])
        precision = clipped / total if clipped else 1.0 / (2.0 * total)
        log_prec += 0.25 * np.log(precision)
    bp = 1.0 if c_len >= r_len else np.exp(1.0 - r_len / c_len)
    return float(bp * np.exp(log_prec))


def self_bleu(groups):
    """Mean BLEU-4 of each sentence against all others of its diagnosis,
    macro-averaged across diagnoses; in [0, 1]. Groups of one are skipped."""
    per_group = []
    for _diag, sentences in sorted(groups.items()):
        if len(sentences) < 2:
            continue
        scores = []
        for i, cand in enumerate(sentences):
            refs = [s for j, s in enumerate(sentences) if j != i]
            scores.append(bleu4(cand, refs))
        per_group.append(float(np.mean(scores)))
    if not per_group:
        raise ValueError("self_bleu needs a group with at least two sentences")
    return float(np.mean(per_group))


def explanation_groups(explanations):
    groups = {}
    for e in explanations:
        groups.setdefault(e.diagnosis, []).append(list(e.tokens))
    return groups


def retrieval_attack(schema, codec, classifier, generator, images, k=10):
    """Generate explanations for each query's k nearest images (cosine over
    frozen gap features) and average the pairwise cosine distance of the
    resulting embeddings. Queries with fewer than two usable explanations
    are skipped and counted."""
    from .models import explained_diagnoses, generate_nle
    from .trainer import _pixel_batch, _predictions_from_probs

    if len(images) < k + 1:
        raise ValueError(f"retrieval attack needs at least {k + 1} images")
    probs, taps = classify(classifier, Tensor(_pixel_batch(images)), training=False)
    predictions = _predictions_from_probs(probs.data)
    feats = taps["gap"].data
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = feats / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    distances, skipped = [], 0
    for q in range(len(images)):
        explained = explained_diagnoses(schema, predictions[q])
        if not explained:
            skipped += 1
            continue
        diagnosis = explained[0]
        demb = codec.diagnosis_embedding(diagnosis)
        neighbour_idx = np.argsort(-sims[q], kind="stable")[:k]
        embs = []
        for j in neighbour_idx:
            if diagnosis not in explained_diagnoses(schema, predictions[j]):
                continue
            embs.append(generate_nle(generator, feats[j], probs.data[j], demb))
        if len(embs) < 2:
            skipped += 1
            continue
        embs = np.stack(embs)
        e_norm = embs / np.maximum(np.linalg.norm(embs, axis=1, keepdims=True), 1e-12)
        cos = e_norm @ e_norm.T
        iu = np.triu_indices(len(embs), k=1)
        distances.append(float(np.mean(1.0 - cos[iu])))
    if not distances:
        return None, skipped
    return float(np.mean(distances)), skipped


# ---------------------------------------------------------------------------
# plausibility (embedding-overlap F1 against ground-truth sentences)

def cxbs(codec, pairs):
    """Greedy token-embedding matching F1 between candidate and reference
    sentences, mean over the provided (candidate, reference) pairs. The
    caller restricts pairs to correctly predicted explanations."""
    if not pairs:
        return None
    scores = []
    for cand, ref in pairs:
        c = np.stack([codec.token_vector(t) for t in cand])
        r = np.stack([codec.token_vector(t) for t in ref])
        c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
        r = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
        sims = c @ r.T
        precision = float(np.mean(np.max(sims, axis=1)))
        recall = float(np.mean(np.max(sims, axis=0)))
        if precision + recall <= 0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def correct_subset_pairs(schema, codec, explanations, db_grammar="medical"):
    """(candidate, reference) token pairs for explanations whose predicted
    diagnosis class and evidence states match the ground truth."""
    from .domain import gt_sentence_for
    from .trainer import _prediction_correct

    grammar = schema.grammar(db_grammar)
    pairs = []
    for e in explanations:
        if not _prediction_correct(schema, e.prediction, e.target, e.diagnosis):
            continue
        ref = gt_sentence_for(schema, e.target, e.diagnosis,
                              style_seed=e.image_seed, grammar=grammar,
                              image_seed=e.image_seed)
        pairs.append((list(e.tokens), list(ref.tokens)))
    return pairs


# ---------------------------------------------------------------------------
# classifier AUC

def binary_auc(scores, labels):
    """Exact rank-statistic ROC AUC with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = int(np.sum(labels))
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValueError("binary_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[i : j + 1] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = float(np.sum(ranks[labels[order]]))
    return (pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def macro_auc(schema, classifier, images):
    """Per diagnosis label: AUC of P(positive) vs (target == positive) and of
    P(uncertain)+P(positive) vs (target != negative); macro average. Labels
    with a degenerate class split are excluded and reported."""
    from .trainer import _pixel_batch, _target_matrix

    probs, _ = classify(classifier, Tensor(_pixel_batch(images)), training=False)
    targets = _target_matrix(images)
    values, excluded = [], []
    for i, lb in enumerate(schema.diagnosis_labels):
        triples = probs.data[:, i, :]
        for scores, labels, tag in (
            (triples[:, 2], targets[:, i] == 2, "positive"),
            (triples[:, 1] + triples[:, 2], targets[:, i] != 0, "present"),
        ):
            try:
                values.append(binary_auc(scores, labels))
            except ValueError:
                excluded.append((lb, tag))
    if not values:
        raise ValueError("no label admits an AUC (all degenerate)")
    return float(np.mean(values)), excluded


# ---------------------------------------------------------------------------
# readability

_VOWELS = set("aeiouy")


def count_syllables(word):
    """Deterministic vowel-group counter; every word has at least one."""
    groups = 0
    prev = False
    for ch in word.lower():
        is_vowel = ch in _VOWELS
        if is_vowel and not prev:
            groups += 1
        prev = is_vowel
    return max(groups, 1)


def readability_grade(sentences):
    """Mean Flesch-Kincaid grade: 0.39 wps + 11.8 spw - 15.59 per sentence."""
    if not sentences:
        raise ValueError("readability needs at least one sentence")
    grades = []
    for tokens in sentences:
        words = len(tokens)
        syllables = sum(count_syllables(t) for t in tokens)
        grades.append(0.39 * words + 11.8 * (syllables / words) - 15.59)
    return float(np.mean(grades))


# ---------------------------------------------------------------------------
# full report

def evaluate_run(schema, codec, classifier, generator, explanations, images,
                 counts, db=None, retrieval_k=10, deletion_seed=97,
                 train_mean_pixel=0.0):
    report = MetricsReport(
        nle_count_total=counts["total"], nle_count_correct=counts["correct"],
    )
    report.auc, _ = macro_auc(schema, classifier, images)
    if explanations:
        report.clev_macro_f1 = clev_score(schema, explanations)
        flip, delta, flip_rand, ungroundable = deletion_metric(
            schema, explanations, classifier, train_mean_pixel,
            rng=np.random.default_rng(deletion_seed))
        report.flip_pct, report.delta_p = flip, delta
        report.flip_pct_random, report.ungroundable = flip_rand, ungroundable
        report.y_given_img, report.y_given_nle, report.y_given_img_nle = (
            simulatability(schema, explanations))
        groups = explanation_groups(explanations)
        if any(len(g) >= 2 for g in groups.values()):
            report.self_bleu = 100.0 * self_bleu(groups)
        if len(images) >= retrieval_k + 1:
            report.retrieval_distance, _ = retrieval_attack(
                schema, codec, classifier, generator, images, k=retrieval_k)
        grammar_name = db.grammar_name if db is not None else "medical"
        pairs = correct_subset_pairs(schema, codec, explanations, grammar_name)
        report.cxbs = cxbs(codec, pairs)
        report.readability_gen = readability_grade([list(e.tokens) for e in explanations])
        if db is not None:
            db_sentences = [list(tok) for items in db.entries.values() for tok, _ in items]
            report.readability_db = readability_grade(db_sentences)
    return report
