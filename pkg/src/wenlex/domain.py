"""Deterministic synthetic image/grammar micro-domain.

Images are quadrant-based geometric primitives over Gaussian background
noise; labels are per-finding categorical states (negative / uncertain /
positive). A finite sentence grammar with a fixed slot template supplies
ground-truth explanations, and rule-based readers stand in for the external
labeler, grounder, and report reader: every sentence can be parsed back to
its (diagnosis, evidence, location) triple by keyword rules alone.
"""

import json
from dataclasses import dataclass, field

import numpy as np

NEG, UNC, POS = 0, 1, 2
STATE_NAMES = ("negative", "uncertain", "positive")
QUADRANT_NAMES = ("upper_left", "upper_right", "lower_left", "lower_right")


class UngroundableError(ValueError):
    """Sentence carries no usable location token."""


@dataclass(frozen=True)
class LabelVector:
    """Per-label class states in schema order, optionally with probabilities."""

    states: tuple
    probs: tuple = None

    def __post_init__(self):
        if self.probs is not None:
            for triple in self.probs:
                if len(triple) != 3 or any(p < 0 or p > 1 for p in triple):
                    raise ValueError(f"invalid probability triple {triple}")
                if abs(sum(triple) - 1.0) > 1e-9:
                    raise ValueError(f"probabilities do not sum to 1: {triple}")


@dataclass(frozen=True)
class GrammarSentence:
    tokens: tuple
    diagnosis_label: str
    evidence_label: str
    quadrant: int
    severity_class: int  # UNC or POS
    grammar: str


@dataclass(frozen=True)
class Grammar:
    """Finite sentence grammar over the fixed slot template.

    Template: <severity> <evidence-noun> <in-connective> <location>
              <suggest-connective> <diagnosis-noun>
    """

    name: str
    hedged: tuple
    assertive: tuple
    evidence_nouns: dict   # evidence label -> token
    diagnosis_nouns: dict  # diagnosis label -> token
    locations: tuple       # quadrant index -> token tuple
    in_connective: tuple
    suggest_connective: tuple

    def severity_words(self, severity_class):
        return self.hedged if severity_class == UNC else self.assertive

    def make_tokens(self, severity_word, evidence_label, quadrant, diagnosis_label):
        return (
            (severity_word, self.evidence_nouns[evidence_label])
            + self.in_connective
            + self.locations[quadrant]
            + self.suggest_connective
            + (self.diagnosis_nouns[diagnosis_label],)
        )

    def enumerate_sentences(self):
        """All sentences in fixed order: severity, evidence, location, diagnosis."""
        out = []
        for sev_class, words in ((UNC, self.hedged), (POS, self.assertive)):
            for word in words:
                for ev in self.evidence_nouns:
                    for q in range(len(self.locations)):
                        for diag in self.diagnosis_nouns:
                            out.append(GrammarSentence(
                                tokens=self.make_tokens(word, ev, q, diag),
                                diagnosis_label=diag,
                                evidence_label=ev,
                                quadrant=q,
                                severity_class=sev_class,
                                grammar=self.name,
                            ))
        return out

    def vocabulary(self):
        vocab = set(self.hedged) | set(self.assertive)
        vocab |= set(self.evidence_nouns.values()) | set(self.diagnosis_nouns.values())
        vocab |= set(self.in_connective) | set(self.suggest_connective)
        for loc in self.locations:
            vocab |= set(loc)
        return vocab


def medical_grammar(diagnosis_labels, evidence_labels):
    noun_pool = ("alphagitis", "betaplasia", "gammatosis", "deltopenia", "epsilosis")
    ev_pool = ("shadowing", "mottling", "stippling", "reticulince")
    return Grammar(
        name="medical",
        hedged=("equivocal", "questionable", "borderline", "indeterminate",
                "ambiguous", "tentative", "presumed", "suspected"),
        assertive=("pronounced", "conspicuous", "extensive", "prominent",
                   "marked", "definite", "dominant", "emphatic"),
        evidence_nouns={lb: ev_pool[i] for i, lb in enumerate(evidence_labels)},
        diagnosis_nouns={lb: noun_pool[i] for i, lb in enumerate(diagnosis_labels)},
        locations=(("upper", "left"), ("upper", "right"), ("lower", "left"), ("lower", "right")),
        in_connective=("in", "the"),
        suggest_connective=("suggesting",),
    )


def layman_grammar(diagnosis_labels, evidence_labels):
    noun_pool = ("alpha", "beta", "gamma", "delta", "omega")
    ev_pool = ("fog", "dots", "specks", "haze")
    return Grammar(
        name="layman",
        hedged=("faint", "vague", "dim", "soft", "mild", "weak", "thin", "pale"),
        assertive=("clear", "strong", "bold", "sharp", "big", "wide", "deep", "firm"),
        evidence_nouns={lb: ev_pool[i] for i, lb in enumerate(evidence_labels)},
        diagnosis_nouns={lb: noun_pool[i] for i, lb in enumerate(diagnosis_labels)},
        locations=(("top", "left"), ("top", "right"), ("bottom", "left"), ("bottom", "right")),
        in_connective=("at", "the"),
        suggest_connective=("shows",),
    )


@dataclass(frozen=True)
class RenderRule:
    quadrant: int
    shape: str  # "disk" or "frame"


@dataclass(frozen=True)
class DomainSchema:
    """Label set, render rules, and the grammars attached to the domain."""

    diagnosis_labels: tuple = ("alpha", "beta", "gamma")
    evidence_labels: tuple = ("shade", "speck")
    image_shape: tuple = (1, 32, 32)
    noise_sigma: float = 0.05
    tau_read: float = 0.3
    class_intensity: tuple = (0.0, 0.225, 0.65)  # negative, uncertain, positive
    # each rendered primitive gets one of n_intensity_levels amplitude offsets
    # spread over +/- the class jitter, one severity synonym per level; ranges
    # stay inside the tau_read bands (uncertain < tau < positive throughout)
    class_jitter: tuple = (0.0, 0.05, 0.28)
    n_intensity_levels: int = 8
    render_rules: dict = None
    primary_evidence: dict = None
    grammars: tuple = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.diagnosis_labels) + len(self.evidence_labels) < 2:
            raise ValueError("schema needs at least 2 labels")
        if self.render_rules is None:
            # global average pooling in the classifier erases location, so every
            # label needs a globally distinct silhouette, not just its own quadrant
            shapes = ("disk", "square", "cross", "diamond", "frame")
            rules = {}
            for i, lb in enumerate(self.diagnosis_labels):
                rules[lb] = RenderRule(quadrant=i % 4, shape=shapes[i % len(shapes)])
            n = len(self.diagnosis_labels)
            for i, lb in enumerate(self.evidence_labels):
                rules[lb] = RenderRule(quadrant=3, shape=shapes[(n + i) % len(shapes)])
            object.__setattr__(self, "render_rules", rules)
        seen = set()
        for lb, rule in self.render_rules.items():
            key = (rule.quadrant, rule.shape)
            if key in seen:
                raise ValueError(f"duplicate quadrant/shape assignment for {lb}")
            seen.add(key)
        if self.primary_evidence is None:
            ev = self.evidence_labels
            object.__setattr__(self, "primary_evidence", {
                lb: ev[i % len(ev)] for i, lb in enumerate(self.diagnosis_labels)
            })
        if self.grammars is None:
            object.__setattr__(self, "grammars", (
                medical_grammar(self.diagnosis_labels, self.evidence_labels),
                layman_grammar(self.diagnosis_labels, self.evidence_labels),
            ))

    @property
    def labels(self):
        return self.diagnosis_labels + self.evidence_labels

    @property
    def num_labels(self):
        return len(self.labels)

    def label_index(self, label):
        return self.labels.index(label)

    def grammar(self, name):
        for g in self.grammars:
            if g.name == name:
                return g
        raise KeyError(f"unknown grammar '{name}'")

    def quadrant_mask(self, quadrant):
        _, h, w = self.image_shape
        mask = np.zeros((h, w), dtype=bool)
        r0 = 0 if quadrant in (0, 1) else h // 2
        c0 = 0 if quadrant in (0, 2) else w // 2
        mask[r0 : r0 + h // 2, c0 : c0 + w // 2] = True
        return mask

    def support_mask(self, label):
        """Pixels the label's primitive occupies when rendered."""
        _, h, w = self.image_shape
        rule = self.render_rules[label]
        qh, qw = h // 2, w // 2
        local = np.zeros((qh, qw), dtype=bool)
        rr, cc = np.mgrid[0:qh, 0:qw]
        cy, cx = (qh - 1) / 2.0, (qw - 1) / 2.0
        if rule.shape == "disk":
            local[(rr - cy) ** 2 + (cc - cx) ** 2 <= (qh / 2.0 - 2.5) ** 2] = True
        elif rule.shape == "square":
            r = qh // 2 - 3
            local[(np.abs(rr - cy) <= r) & (np.abs(cc - cx) <= r)] = True
        elif rule.shape == "cross":
            arm = max(qh // 6, 2)
            span = qh // 2 - 1
            local[(np.abs(rr - cy) <= arm) & (np.abs(cc - cx) <= span)] = True
            local[(np.abs(cc - cx) <= arm) & (np.abs(rr - cy) <= span)] = True
        elif rule.shape == "diamond":
            local[np.abs(rr - cy) + np.abs(cc - cx) <= qh / 2.0 - 1.5] = True
        elif rule.shape == "frame":
            local[:, :] = True
            local[2:-2, 2:-2] = False
        else:
            raise ValueError(f"unknown shape '{rule.shape}'")
        mask = np.zeros((h, w), dtype=bool)
        r0 = 0 if rule.quadrant in (0, 1) else h // 2
        c0 = 0 if rule.quadrant in (0, 2) else w // 2
        mask[r0 : r0 + qh, c0 : c0 + qw] = local
        return mask


@dataclass(frozen=True)
class SynthImage:
    pixels: np.ndarray
    target: LabelVector
    seed: int


# ---------------------------------------------------------------------------
# rendering and sampling

def intensity_level(schema, image_seed, label_index):
    """Deterministic per-(image, label) sub-level index in [0, n_intensity_levels)."""
    state = np.random.SeedSequence((int(image_seed), int(label_index), 0xB1))
    return int(state.generate_state(1)[0] % schema.n_intensity_levels)


def _level_offset(schema, level, state):
    n = schema.n_intensity_levels
    if n == 1:
        return 0.0
    return schema.class_jitter[state] * (2.0 * level / (n - 1) - 1.0)


def render_image(schema, target, seed):
    """Draw each non-negative label's primitive over Gaussian noise; bit-stable per seed.

    The primitive's amplitude is its class intensity plus the image's
    sub-level offset, so severity wording in ground-truth sentences has a
    visible counterpart in pixel space.
    """
    c, h, w = schema.image_shape
    rng = np.random.default_rng(np.uint64(seed))
    pixels = rng.normal(0.0, schema.noise_sigma, size=(c, h, w))
    for i, label in enumerate(schema.labels):
        state = target.states[i]
        if state == NEG:
            continue
        amplitude = schema.class_intensity[state] + _level_offset(
            schema, intensity_level(schema, seed, i), state)
        pixels[0][schema.support_mask(label)] += amplitude
    np.clip(pixels, -1.0, 1.0, out=pixels)
    return SynthImage(pixels=pixels, target=target, seed=int(seed))


class LabelPrior:
    """Finite categorical prior over whole target patterns."""

    def __init__(self, patterns, schema):
        # patterns: list of (states tuple, probability)
        total = sum(p for _, p in patterns)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("pattern probabilities must sum to 1")
        n_diag = len(schema.diagnosis_labels)
        ev_slice = slice(n_diag, schema.num_labels)
        if not any(p > 0 and any(s != NEG for s in states[:n_diag]) for states, p in patterns):
            raise ValueError("prior assigns no mass to non-negative diagnosis states")
        for states, p in patterns:
            if p > 0 and all(s == NEG for s in states[ev_slice]):
                raise ValueError("prior violates the evidence constraint")
        self.patterns = [(tuple(states), float(p)) for states, p in patterns]
        self.schema = schema

    @classmethod
    def default(cls, schema):
        """Uniform over single-diagnosis targets with evidence state tied to it."""
        patterns = []
        for d in schema.diagnosis_labels:
            for cls_state in (UNC, POS):
                states = [NEG] * schema.num_labels
                states[schema.label_index(d)] = cls_state
                states[schema.label_index(schema.primary_evidence[d])] = cls_state
                patterns.append((tuple(states), 1.0))
        return cls([(s, p / len(patterns)) for s, p in patterns], schema)

    def sample(self, rng):
        probs = np.array([p for _, p in self.patterns])
        idx = rng.choice(len(self.patterns), p=probs)
        return LabelVector(states=self.patterns[idx][0])

    def marginals(self):
        """Exact per-label state probabilities implied by the patterns."""
        out = np.zeros((self.schema.num_labels, 3))
        for states, p in self.patterns:
            for i, s in enumerate(states):
                out[i, s] += p
        return out


def sample_dataset(schema, n_images, prior, seed):
    """I.i.d. targets from the prior; each image regenerable from its own seed."""
    if n_images <= 0:
        raise ValueError("n_images must be positive")
    target_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    seed_source = np.random.SeedSequence(entropy=seed, spawn_key=(2,))
    image_seeds = seed_source.generate_state(n_images, dtype=np.uint64)
    images = []
    for i in range(n_images):
        target = prior.sample(target_rng)
        images.append(render_image(schema, target, int(image_seeds[i])))
    return images


# ---------------------------------------------------------------------------
# ground-truth sentences and rule-based readers

def gt_sentence_for(schema, target, diagnosis_label, style_seed, grammar=None,
                    image_seed=None):
    """Grammar sentence matching the target's restriction to this diagnosis.

    With ``image_seed`` the severity synonym mirrors the rendered intensity
    sub-level of that image, so wording carries image-specific style; without
    it the synonym is a style_seed draw within the class. Evidence ties break
    by style_seed either way.
    """
    grammar = grammar or schema.grammars[0]
    d_idx = schema.label_index(diagnosis_label)
    severity_class = target.states[d_idx]
    if severity_class == NEG:
        raise ValueError(f"diagnosis '{diagnosis_label}' is negative in the target")
    candidates = [lb for lb in schema.evidence_labels
                  if target.states[schema.label_index(lb)] != NEG]
    if not candidates:
        raise ValueError("target has no non-negative evidence label")
    rng = np.random.default_rng(np.uint64(style_seed))
    evidence = candidates[int(rng.integers(len(candidates)))]
    words = grammar.severity_words(severity_class)
    if image_seed is not None:
        level = intensity_level(schema, image_seed, d_idx)
        word = words[level * len(words) // schema.n_intensity_levels]
    else:
        word = words[int(rng.integers(len(words)))]
    quadrant = schema.render_rules[diagnosis_label].quadrant
    return GrammarSentence(
        tokens=grammar.make_tokens(word, evidence, quadrant, diagnosis_label),
        diagnosis_label=diagnosis_label,
        evidence_label=evidence,
        quadrant=quadrant,
        severity_class=severity_class,
        grammar=grammar.name,
    )


def _keyword_tables(schema):
    hedges, assertives = set(), set()
    noun_to_label = {}
    for g in schema.grammars:
        hedges |= set(g.hedged)
        assertives |= set(g.assertive)
        for lb, tok in g.evidence_nouns.items():
            noun_to_label[tok] = lb
        for lb, tok in g.diagnosis_nouns.items():
            noun_to_label[tok] = lb
    return hedges, assertives, noun_to_label


def oracle_label(schema, tokens):
    """Keyword-rule labeler: noun mentions set labels, hedges make them uncertain.

    Arbitrary token sequences are allowed; anything unmentioned is negative.
    """
    hedges, _assertives, noun_to_label = _keyword_tables(schema)
    severity = UNC if any(t in hedges for t in tokens) else POS
    states = [NEG] * schema.num_labels
    for t in tokens:
        lb = noun_to_label.get(t)
        if lb is not None:
            states[schema.label_index(lb)] = severity
    n_diag = len(schema.diagnosis_labels)
    return tuple(states[:n_diag]), tuple(states[n_diag:])


def oracle_states(schema, tokens):
    diag, evid = oracle_label(schema, tokens)
    return LabelVector(states=diag + evid)


def ground_sentence(schema, tokens):
    """Quadrant mask named by the sentence's location tokens."""
    for g in schema.grammars:
        for q, loc in enumerate(g.locations):
            k = len(loc)
            for i in range(len(tokens) - k + 1):
                if tuple(tokens[i : i + k]) == loc:
                    return schema.quadrant_mask(q), q
    raise UngroundableError(f"no location token in {tokens}")


def _intensity_class(schema, image_pixels, label):
    support = schema.support_mask(label)
    m = float(np.mean(image_pixels[0][support]))
    if m > schema.tau_read:
        return POS
    if m > schema.tau_read / 2.0:
        return UNC
    return NEG


def proxy_read(schema, tokens=None, image_pixels=None):
    """Rule-based stand-in for a vision-language reader.

    Text only: the keyword labeler. Image only: per-label intensity
    thresholds on the label's own region. Image+text: the text nominates
    labels, the image decides their class (a label claimed by the text is
    kept only when its region shows enough intensity).
    """
    if tokens is None and image_pixels is None:
        raise ValueError("proxy_read needs a sentence, an image, or both")
    if image_pixels is None:
        return oracle_states(schema, tokens)
    img_states = tuple(_intensity_class(schema, image_pixels, lb) for lb in schema.labels)
    if tokens is None:
        return LabelVector(states=img_states)
    claimed = oracle_states(schema, tokens).states
    states = tuple(img if claim != NEG else NEG
                   for claim, img in zip(claimed, img_states))
    return LabelVector(states=states)


# ---------------------------------------------------------------------------
# dataset serialization: JSONL of (seed, target states, split); pixels always
# re-rendered from seed

def dataset_to_jsonl(images, split, schema):
    lines = []
    for img in images:
        record = {
            "seed": int(img.seed),
            "split": split,
            "target": {lb: STATE_NAMES[s] for lb, s in zip(schema.labels, img.target.states)},
        }
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + "\n"


def dataset_from_jsonl(text, schema):
    images = []
    for line in text.strip().splitlines():
        record = json.loads(line)
        states = tuple(STATE_NAMES.index(record["target"][lb]) for lb in schema.labels)
        images.append(render_image(schema, LabelVector(states=states), record["seed"]))
    return images
