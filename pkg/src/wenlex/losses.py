"""Training objectives: distribution matching (MMD and Wasserstein-GP),
feature reconstruction and explanation-classification faithfulness terms,
class-weighted image classification, and the learned uncertainty weighting
that combines them."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .domain import NEG, oracle_label
from .tensor import Tensor


@dataclass(frozen=True)
class MmdConfig:
    """Gaussian-kernel bandwidth rule for the squared-MMD estimator."""

    bandwidth: str = "median_heuristic"  # or "fixed"
    sigma: float = 1.0

    def __post_init__(self):
        if self.bandwidth not in ("median_heuristic", "fixed"):
            raise ValueError(f"unknown bandwidth rule '{self.bandwidth}'")
        if self.bandwidth == "fixed" and self.sigma <= 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass(frozen=True)
class GpConfig:
    gp_lambda: float = 10.0

    def __post_init__(self):
        if self.gp_lambda < 0:
            raise ValueError("gradient-penalty weight must be nonnegative")


def _median_bandwidth(pooled):
    d2 = (
        np.sum(pooled**2, axis=1)[:, None]
        + np.sum(pooled**2, axis=1)[None, :]
        - 2.0 * pooled @ pooled.T
    )
    n = len(pooled)
    dist = np.sqrt(np.maximum(d2[np.triu_indices(n, k=1)], 0.0))
    if dist.size == 0:
        return 1.0
    med = float(np.median(dist))
    return med if med > 0 else 1.0


def _kernel_terms(a, b, sigma):
    """mean_ij exp(-|a_i - b_j|^2 / (2 sigma^2)), differentiable in tensor args."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    m, n = a.shape[0], b.shape[0]
    a2 = T.reshape(T.sum_(T.square(a), axis=1), (m, 1))
    b2 = T.reshape(T.sum_(T.square(b), axis=1), (1, n))
    d2 = T.add(
        T.add(T.broadcast_to(a2, (m, n)), T.broadcast_to(b2, (m, n))),
        T.mul(T.matmul(a, T.transpose(b)), -2.0),
    )
    return T.mean(T.exp(T.mul(d2, -1.0 / (2.0 * sigma * sigma))))


def mmd_squared(x, y, config=MmdConfig()):
    """Biased V-statistic squared MMD with a Gaussian kernel.

    Double sums include the i=j diagonal; the bandwidth (median of pooled
    pairwise distances by default) is treated as a constant for gradients.
    """
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("mmd_squared needs at least one sample on each side")
    if config.bandwidth == "median_heuristic":
        sigma = _median_bandwidth(np.concatenate([x.data, y.data], axis=0))
    else:
        sigma = config.sigma
    kxx = _kernel_terms(x, x, sigma)
    kyy = _kernel_terms(y, y, sigma)
    kxy = _kernel_terms(x, y, sigma)
    return T.add(T.add(kxx, kyy), T.mul(kxy, -2.0))


@dataclass
class NleDatabase:
    """Per-diagnosis ground-truth explanation embeddings with audit sentences."""

    entries: dict  # diagnosis label -> list of (tokens tuple, embedding ndarray)
    grammar_name: str = "medical"
    size: int = field(init=False, default=0)

    def __post_init__(self):
        sizes = {len(v) for v in self.entries.values()}
        if len(sizes) != 1:
            raise ValueError(f"database entry counts differ across diagnoses: {sizes}")
        self.size = sizes.pop()

    def matrix(self, diagnosis):
        if diagnosis not in self.entries:
            raise KeyError(f"database has no entries for diagnosis '{diagnosis}'")
        return np.stack([emb for _, emb in self.entries[diagnosis]])

    def validate_single_diagnosis(self, schema):
        for diag, items in self.entries.items():
            for tokens, _ in items:
                d_states, _e = oracle_label(schema, tokens)
                mentioned = [lb for lb, s in zip(schema.diagnosis_labels, d_states) if s != NEG]
                if mentioned != [diag]:
                    raise ValueError(f"sentence {tokens} does not explain exactly '{diag}'")

    def to_json(self):
        payload = {
            "grammar": self.grammar_name,
            "entries": {
                diag: [{"tokens": list(tok), "embedding": list(map(float, emb))}
                       for tok, emb in items]
                for diag, items in sorted(self.entries.items())
            },
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        entries = {
            diag: [(tuple(item["tokens"]), np.array(item["embedding"]))
                   for item in items]
            for diag, items in payload["entries"].items()
        }
        return cls(entries=entries, grammar_name=payload["grammar"])


def plausibility_mmd(generated_by_label, db, config=MmdConfig()):
    """Mean over labels present in the batch of per-label squared MMD to the DB."""
    if not generated_by_label:
        raise ValueError("no generated embeddings in batch")
    per_label = []
    for label in sorted(generated_by_label):
        gen = generated_by_label[label]
        per_label.append(mmd_squared(gen, Tensor(db.matrix(label)), config))
    total = per_label[0]
    for term in per_label[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / len(per_label))


def critic_loss(critic, real, fake, diag_embs, gp=GpConfig(), rng=None):
    """Wasserstein critic loss with gradient penalty on per-pair interpolates.

    ``real``/``fake``/``diag_embs`` are paired row-for-row (same diagnosis per
    row). Gradients flow to the critic's parameters, including through the
    penalty term (double backward).
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    diag_embs = np.asarray(diag_embs, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"real/fake batch shapes differ: {real.shape} vs {fake.shape}")
    if rng is None:
        rng = np.random.default_rng(0)
    m = real.shape[0]
    alpha = rng.uniform(0.0, 1.0, size=(m, 1))
    diag_const = Tensor(diag_embs)
    d_fake = critic.forward(Tensor(fake), diag_const)
    d_real = critic.forward(Tensor(real), diag_const)
    wass = T.sub(T.mean(d_fake), T.mean(d_real))
    interp = Tensor(alpha * real + (1.0 - alpha) * fake, requires_grad=True)
    tape = T.current_tape()
    if tape is None:
        raise RuntimeError("critic_loss must run under an active Tape")
    scores = critic.forward(interp, diag_const)
    total_score = T.sum_(scores)
    grad = T.grad_of_output_wrt_input(tape, total_score, interp)
    norms = T.l2_norm(grad, axis=1)
    penalty = T.mean(T.square(T.sub(norms, 1.0)))
    return T.add(wass, T.mul(penalty, gp.gp_lambda))


def generator_adv_loss(critic, fake, diag_embs):
    """Negated mean critic score of generated embeddings; critic detached."""
    frozen = critic.detached()
    scores = frozen.forward(fake, Tensor(np.asarray(diag_embs, dtype=np.float64)))
    return T.mul(T.mean(scores), -1.0)


def reconstruction_loss(frozen_mbe, original_images, generated_images, groups, tap="block2"):
    """Squared feature distance between each original image and the mean over
    its generated-explanation features, averaged over images with explanations.

    The squared difference is averaged over feature dimensions so the term's
    scale is comparable across taps (and to the other loss components).
    ``groups`` maps each original image to its row span [start, stop) in the
    generated batch; images without explanations are skipped, not zero-counted.
    """
    if not groups:
        raise ValueError("reconstruction_loss needs at least one image with explanations")
    _, orig_taps = frozen_mbe.forward(Tensor(np.asarray(original_images)), training=False)
    orig = orig_taps[tap].data
    _, gen_taps = frozen_mbe.forward(generated_images, training=False)
    gen = gen_taps[tap]
    per_image = []
    for img_idx, start, stop in groups:
        mean_feat = T.mean(T.slice_axis(gen, 0, start, stop), axis=0)
        diff = T.sub(mean_feat, Tensor(orig[img_idx]))
        per_image.append(T.mean(T.square(diff)))
    total = per_image[0]
    for term in per_image[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / len(per_image))


def nle_classification_loss(frozen_mbe, generated_images, target_classes, label_mask):
    """Cross-entropy of the frozen classifier on generated images against the
    live prediction's argmax classes, restricted to the masked label set
    (the explained diagnosis plus all evidence labels)."""
    target_classes = np.asarray(target_classes)
    label_mask = np.asarray(label_mask, dtype=bool)
    log_probs, _ = frozen_mbe.forward(generated_images, training=False)
    n, num_labels, c = log_probs.shape
    onehot = np.zeros((n, num_labels, c))
    rows, labels = np.nonzero(label_mask)
    onehot[rows, labels, target_classes[rows, labels]] = 1.0
    count = len(rows)
    if count == 0:
        raise ValueError("no unmasked labels for the classification loss")
    picked = T.mul(log_probs, Tensor(onehot))
    return T.mul(T.sum_(picked), -1.0 / count)


def class_weights_from_split(images, schema):
    """Inverse class-frequency weights per (label, class), mean 1 per label."""
    counts = np.ones((schema.num_labels, 3))  # add-one smoothing
    for im in images:
        for i, s in enumerate(im.target.states):
            counts[i, s] += 1
    inv = 1.0 / counts
    return inv / np.mean(inv, axis=1, keepdims=True)


def image_classification_loss(log_probs, target_classes, class_weights):
    """Class-weighted cross entropy, mean over batch and labels."""
    target_classes = np.asarray(target_classes)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if np.any(class_weights <= 0):
        raise ValueError("class weights must be positive")
    b, num_labels, c = log_probs.shape
    onehot = np.zeros((b, num_labels, c))
    for i in range(b):
        onehot[i, np.arange(num_labels), target_classes[i]] = class_weights[
            np.arange(num_labels), target_classes[i]
        ]
    picked = T.mul(log_probs, Tensor(onehot))
    return T.mul(T.sum_(picked), -1.0 / (b * num_labels))


POST_HOC_TERMS = ("plaus", "nle_clf", "nle_recons")
IN_MODEL_TERMS = POST_HOC_TERMS + ("img_clf",)


class UncertaintyWeights:
    """Learnable positive task weights, one per loss term, initialized to 1.

    Each sigma is exp of an unconstrained scalar so positivity holds at all
    times; the combined loss is sum L_i / (2 sigma_i^2) + log(1 + sigma_i^2).
    """

    def __init__(self, mode):
        self.mode = mode
        names = IN_MODEL_TERMS if mode == "in_model" else POST_HOC_TERMS
        self.raw = {name: Tensor(np.zeros(()), requires_grad=True) for name in names}

    def named_params(self):
        return [(f"sigma_raw/{name}", t) for name, t in self.raw.items()]

    def sigma_value(self, name):
        return float(np.exp(self.raw[name].data))

    def sigma_values(self):
        return {name: self.sigma_value(name) for name in self.raw}


def combine_losses(components, weights, mode):
    """Uncertainty-weighted total: sum of L/(2 sigma^2) + log(1 + sigma^2)."""
    if mode not in ("post_hoc", "in_model"):
        raise ValueError(f"unknown mode '{mode}'")
    if mode == "in_model" and "img_clf" not in components:
        raise ValueError("in_model mode requires the img_clf component")
    if mode == "post_hoc" and "img_clf" in components:
        raise ValueError("post_hoc mode must not include img_clf")
    unknown = set(components) - set(weights.raw)
    if unknown:
        raise ValueError(f"components without a weight slot: {sorted(unknown)}")
    total = None
    for name in weights.raw:
        if name not in components:
            continue
        raw = weights.raw[name]
        sigma_sq = T.exp(T.mul(raw, 2.0))
        inv_two_sigma_sq = T.mul(T.exp(T.mul(raw, -2.0)), 0.5)
        term = T.add(T.mul(components[name], inv_two_sigma_sq), T.log1p(sigma_sq))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no loss components provided")
    return total
