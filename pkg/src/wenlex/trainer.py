"""Training orchestration: classifier pretraining, explanation-database
construction, the post-hoc / in-model training loop with uncertainty-weighted
losses, and explanation generation from trained checkpoints."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .domain import (
    NEG, DomainSchema, LabelPrior, LabelVector, gt_sentence_for, oracle_label,
    sample_dataset,
)
from .losses import (
    GpConfig, MmdConfig, NleDatabase, UncertaintyWeights,
    class_weights_from_split, combine_losses, critic_loss, generator_adv_loss,
    image_classification_loss, nle_classification_loss, plausibility_mmd,
    reconstruction_loss,
)
from .models import (
    Classifier, Critic, FrozenCopy, Generator, TextEmbeddingToImage,
    classify, explained_diagnoses, save_checkpoint,
)
from .optim import AdamW, lr_schedule
from .tensor import Tape, Tensor

LOG_COLUMNS = ("step", "lr", "plaus", "nle_clf", "nle_recons", "img_clf",
               "sigma1", "sigma2", "sigma3", "sigma4", "wall_ms")
SIGMA_ORDER = ("plaus", "nle_clf", "nle_recons", "img_clf")


class MissingArtifactError(RuntimeError):
    """An upstream artifact (dataset, checkpoint, database) is absent."""


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def make_schema(cfg):
    return DomainSchema(noise_sigma=cfg.domain.noise_sigma, tau_read=cfg.domain.tau_read)


def make_splits(cfg, schema):
    """Deterministic train/val/test datasets from the default prior."""
    prior = LabelPrior.default(schema)
    return {
        "train": sample_dataset(schema, cfg.data.n_train, prior, seed=cfg.data.seed),
        "val": sample_dataset(schema, cfg.data.n_val, prior, seed=cfg.data.seed + 7001),
        "test": sample_dataset(schema, cfg.data.n_test, prior, seed=cfg.data.seed + 7002),
    }


def _target_matrix(images):
    return np.array([im.target.states for im in images])


def _pixel_batch(images):
    return np.stack([im.pixels for im in images])


# ---------------------------------------------------------------------------
# classifier pretraining

def pretrain_classifier(cfg, schema, splits):
    """Train the classifier alone with class-weighted CE; keep the lowest-val-loss epoch."""
    pre = cfg.pretrain
    train, val = splits["train"], splits["val"]
    if not train or not val:
        raise MissingArtifactError("pretraining needs non-empty train and val splits")
    clf = Classifier(schema, seed=pre.seed)
    opt = AdamW(clf.named_params(), lr=pre.base_lr, weight_decay=pre.weight_decay)
    weights = class_weights_from_split(train, schema)
    steps_per_epoch = len(train) // pre.batch_size
    total_steps = max(pre.epochs * steps_per_epoch, 1)
    warmup = min(pre.warmup_steps, total_steps)
    targets = _target_matrix(train)
    step = 0
    best = (np.inf, None)
    history = []
    for epoch in range(pre.epochs):
        order = _stream(pre.seed, 1, epoch).permutation(len(train))
        for b in range(steps_per_epoch):
            idx = order[b * pre.batch_size : (b + 1) * pre.batch_size]
            batch = Tensor(_pixel_batch([train[i] for i in idx]))
            with Tape() as tape:
                log_probs, _ = clf.forward(batch, training=True)
                loss = image_classification_loss(log_probs, targets[idx], weights)
            opt.zero_grad()
            tape.backward(loss)
            opt.step(lr=lr_schedule(step, total_steps, warmup, pre.base_lr))
            step += 1
        val_loss = _classifier_val_loss(clf, val, weights, schema)
        history.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, {k: v.copy() for k, v in clf.state_arrays("clf").items()})
    clf.load_state_arrays(best[1], "clf")
    return clf, {"val_losses": history, "best_val_loss": best[0]}


def _classifier_val_loss(clf, images, weights, schema):
    log_probs, _ = clf.forward(Tensor(_pixel_batch(images)), training=False)
    return image_classification_loss(log_probs, _target_matrix(images), weights).item()


# ---------------------------------------------------------------------------
# explanation database

def build_database(schema, codec, train_images, n, seed, grammar_name="medical"):
    """Sample n single-diagnosis ground-truth explanations per diagnosis label."""
    grammar = schema.grammar(grammar_name)
    pools = {d: [] for d in schema.diagnosis_labels}
    for im in train_images:
        for d_idx, d in enumerate(schema.diagnosis_labels):
            if im.target.states[schema.label_index(d)] == NEG:
                continue
            style = np.random.SeedSequence((seed, im.seed, d_idx)).generate_state(1)[0]
            sentence = gt_sentence_for(schema, im.target, d, int(style),
                                       grammar=grammar, image_seed=im.seed)
            diag_states, _ = oracle_label(schema, sentence.tokens)
            if sum(1 for s in diag_states if s != NEG) != 1:
                continue  # multi-diagnosis sentences are excluded
            pools[d].append(sentence)
    entries = {}
    for d_idx, d in enumerate(schema.diagnosis_labels):
        if len(pools[d]) < n:
            raise MissingArtifactError(
                f"diagnosis '{d}' has only {len(pools[d])} eligible sentences, need {n}")
        rng = _stream(seed, 3, d_idx)
        picks = rng.choice(len(pools[d]), size=n, replace=False)
        entries[d] = [(pools[d][i].tokens, codec.embed(pools[d][i].tokens))
                      for i in sorted(picks)]
    db = NleDatabase(entries=entries, grammar_name=grammar_name)
    db.validate_single_diagnosis(schema)
    return db


# ---------------------------------------------------------------------------
# the main training loop

@dataclass
class RunArtifacts:
    mode: str
    plausibility: str
    grammar: str
    tap: str
    best_val_loss: float
    best_epoch: int
    final_val_loss: float
    sync_steps: list
    log_rows: list = field(repr=False)
    checkpoint: dict = field(repr=False, default=None)
    classifier_hash_before: str = ""
    classifier_hash_after: str = ""


def _conditioning_rows(schema, predictions):
    """One (image index, diagnosis) row per explained diagnosis, image-ordered."""
    rows = []
    for i, pred in enumerate(predictions):
        for d in explained_diagnoses(schema, pred):
            rows.append((i, d))
    return rows


def _build_cond_tensor(rows, probs, gap, codec, grammar_name, on_tape):
    """Concatenate gap features, prediction probabilities, and diagnosis embedding.

    With ``on_tape`` the rows are sliced from the live tensors so gradients
    reach the classifier; otherwise raw arrays become one constant tensor.
    """
    num_labels3 = probs.shape[1] * probs.shape[2]
    diag_embs = np.stack([codec.diagnosis_embedding(d, grammar_name) for _, d in rows])
    if not on_tape:
        data = np.concatenate(
            [gap.data[[i for i, _ in rows]],
             probs.data[[i for i, _ in rows]].reshape(len(rows), num_labels3),
             diag_embs], axis=1)
        return Tensor(data), diag_embs
    pieces = []
    for r, (i, _d) in enumerate(rows):
        gap_row = T.slice_axis(gap, 0, i, i + 1)
        prob_row = T.reshape(T.slice_axis(probs, 0, i, i + 1), (1, num_labels3))
        demb = Tensor(diag_embs[r : r + 1])
        pieces.append(T.concat([gap_row, prob_row, demb], axis=1))
    return T.concat(pieces, axis=0), diag_embs


def _group_rows(rows):
    """Contiguous [start, stop) spans per image index (rows are image-ordered)."""
    groups = []
    for r, (i, _d) in enumerate(rows):
        if groups and groups[-1][0] == i:
            groups[-1][2] = r + 1
        else:
            groups.append([i, r, r + 1])
    return [tuple(g) for g in groups]


def _nle_targets_and_mask(schema, rows, predictions, soft=False):
    n_labels = schema.num_labels
    n_diag = len(schema.diagnosis_labels)
    classes = np.zeros((len(rows), n_labels), dtype=int)
    mask = np.zeros((len(rows), n_labels), dtype=bool)
    soft_targets = np.zeros((len(rows), n_labels, 3)) if soft else None
    for r, (i, d) in enumerate(rows):
        pred = predictions[i]
        classes[r] = pred.states
        mask[r, schema.label_index(d)] = True
        mask[r, n_diag:] = True  # evidence labels are shared by all targets
        if soft:
            soft_targets[r] = np.array(pred.probs)
    return classes, mask, soft_targets


def _predictions_from_probs(probs_data):
    preds = []
    for row in probs_data:
        states = tuple(int(np.argmax(p)) for p in row)
        preds.append(LabelVector(states=states, probs=tuple(tuple(p) for p in row)))
    return preds


def train_wenlex(cfg, schema, codec, classifier, db, splits, step_callback=None):
    """Run one training configuration and return artifacts with the best checkpoint.

    ``classifier`` is the pretrained model for post-hoc mode (left bitwise
    untouched) and must be None for in-model mode (trained from scratch).
    """
    tc = cfg.train
    tc.validate()
    post_hoc = tc.mode == "post_hoc"
    if post_hoc and classifier is None:
        raise MissingArtifactError("post-hoc training requires a pretrained classifier")
    if not post_hoc and classifier is not None:
        raise ValueError("in-model training starts the classifier fresh")
    train, val = splits["train"], splits["val"]
    dim = codec.dim
    if not post_hoc:
        classifier = Classifier(schema, seed=tc.seed + 104)
    hash_before = classifier.params_sha256()
    generator = Generator(schema, dim=dim, seed=tc.seed + 101)
    text2img = TextEmbeddingToImage(schema, dim=dim, seed=tc.seed + 102)
    critic = Critic(dim=dim, seed=tc.seed + 103) if tc.plausibility == "adversarial" else None
    weights = UncertaintyWeights(tc.mode)
    mmd_cfg = MmdConfig(bandwidth=tc.mmd_bandwidth, sigma=tc.mmd_sigma)
    gp_cfg = GpConfig(gp_lambda=tc.gp_lambda)

    named = [(f"gen/{n}", p) for n, p in generator.named_params()]
    named += [(f"t2i/{n}", p) for n, p in text2img.named_params()]
    named += [(n, p) for n, p in weights.named_params()]
    if not post_hoc:
        named += [(f"clf/{n}", p) for n, p in classifier.named_params()]
    sigma_names = {n for n, _ in weights.named_params()}
    opt = AdamW(named, lr=tc.base_lr, weight_decay=tc.weight_decay, no_decay=sigma_names)
    critic_opt = (AdamW([(f"critic/{n}", p) for n, p in critic.named_params()],
                        lr=tc.base_lr, weight_decay=tc.weight_decay)
                  if critic is not None else None)

    frozen = FrozenCopy(classifier)
    class_weights = class_weights_from_split(train, schema)
    gt_targets = _target_matrix(train)
    steps_per_epoch = max(len(train) // tc.batch_size, 1)
    total_steps = tc.epochs * steps_per_epoch
    if total_steps < 1:
        raise ValueError("training needs at least one step")
    warmup = min(tc.warmup_steps, total_steps // 2)  # short runs clamp the ramp
    needed = {d for im in train for d in schema.diagnosis_labels
              if im.target.states[schema.label_index(d)] != NEG}
    for d in sorted(needed):
        db.matrix(d)  # raises early if the database misses a diagnosis

    log_rows = []
    sync_steps = []
    step = 0
    best = (np.inf, -1, None)
    for epoch in range(tc.epochs):
        order = _stream(tc.seed, 10, epoch).permutation(len(train))
        for b in range(steps_per_epoch):
            t0 = time.perf_counter()
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            batch_images = _pixel_batch([train[i] for i in idx])
            if not post_hoc and frozen.maybe_sync(classifier, step, tc.copy_period):
                sync_steps.append(step)
            if step_callback is not None:
                # fires before this step's parameter update
                step_callback(step=step, classifier=classifier, frozen=frozen,
                              generator=generator)

            if post_hoc:
                probs_c, taps_c = classify(classifier, Tensor(batch_images), training=False)
                predictions = _predictions_from_probs(probs_c.data)
                rows = _conditioning_rows(schema, predictions)
            else:
                # prediction pass just to pick explained diagnoses; the training
                # pass below rebuilds the graph on tape
                probs_c, _ = classify(classifier, Tensor(batch_images), training=False)
                predictions = _predictions_from_probs(probs_c.data)
                rows = _conditioning_rows(schema, predictions)

            if critic is not None and rows:
                _critic_updates(critic, critic_opt, generator, classifier, codec, db,
                                schema, batch_images, rows, predictions, tc, gp_cfg,
                                post_hoc, step,
                                lr_schedule(step, total_steps, warmup, tc.base_lr))

            components = {}
            values = {}
            with Tape() as tape:
                if post_hoc:
                    gap_x, probs_x = taps_c["gap"], probs_c
                else:
                    log_probs_live, taps_live = classifier.forward(
                        Tensor(batch_images), training=True)
                    probs_x, gap_x = T.exp(log_probs_live), taps_live["gap"]
                    components["img_clf"] = image_classification_loss(
                        log_probs_live, gt_targets[idx], class_weights)
                if rows:
                    cond, diag_embs = _build_cond_tensor(
                        rows, probs_x, gap_x, codec, tc.grammar, on_tape=not post_hoc)
                    fake = generator.forward(cond)
                    if tc.plausibility == "mmd":
                        components["plaus"] = _mmd_component(schema, rows, fake, db, mmd_cfg)
                    else:
                        components["plaus"] = generator_adv_loss(critic, fake, diag_embs)
                    if tc.recons or tc.nle_clf:
                        gen_images = text2img.forward(fake, training=len(rows) >= 2)
                        if tc.recons:
                            components["nle_recons"] = reconstruction = _recons_component(
                                frozen.model, batch_images, gen_images, rows, tc.tap)
                        if tc.nle_clf:
                            classes, mask, soft = _nle_targets_and_mask(
                                schema, rows, predictions, soft=tc.soft_targets)
                            components["nle_clf"] = _nle_clf_component(
                                frozen.model, gen_images, classes, mask, soft)
                if components:
                    total = combine_losses(components, weights, tc.mode)
                    values = {k: v.item() for k, v in components.items()}
            if components:
                opt.zero_grad()
                tape.backward(total)
                opt.step(lr=lr_schedule(step, total_steps, warmup, tc.base_lr))
            wall_ms = (time.perf_counter() - t0) * 1000.0
            log_rows.append(_log_row(step, lr_schedule(step, total_steps, warmup, tc.base_lr),
                                     values, weights, wall_ms))
            step += 1
        val_loss = _validation_loss(cfg, schema, codec, classifier, generator, text2img,
                                    critic, frozen, db, val, weights, mmd_cfg)
        if val_loss < best[0]:
            arrays = _checkpoint_arrays(cfg, classifier, generator, text2img, critic,
                                        weights, opt, step)
            best = (val_loss, epoch, arrays)
    final_val = val_loss
    if best[2] is None:
        raise RuntimeError("no checkpoint was selected")
    return RunArtifacts(
        mode=tc.mode, plausibility=tc.plausibility, grammar=tc.grammar, tap=tc.tap,
        best_val_loss=best[0], best_epoch=best[1], final_val_loss=final_val,
        sync_steps=sync_steps, log_rows=log_rows, checkpoint=best[2],
        classifier_hash_before=hash_before,
        classifier_hash_after=classifier.params_sha256(),
    )


def _mmd_component(schema, rows, fake, db, mmd_cfg):
    by_label = {}
    for r, (_i, d) in enumerate(rows):
        by_label.setdefault(d, []).append(r)
    grouped = {}
    for d, indices in by_label.items():
        pieces = [T.slice_axis(fake, 0, r, r + 1) for r in indices]
        grouped[d] = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
    return plausibility_mmd(grouped, db, mmd_cfg)


def _recons_component(frozen_model, batch_images, gen_images, rows, tap):
    return reconstruction_loss(frozen_model, batch_images, gen_images,
                               _group_rows(rows), tap=tap)


def _nle_clf_component(frozen_model, gen_images, classes, mask, soft):
    if soft is None:
        return nle_classification_loss(frozen_model, gen_images, classes, mask)
    # soft-target variant: cross entropy against the full probability triples
    log_probs, _ = frozen_model.forward(gen_images, training=False)
    weights = soft * mask[:, :, None]
    count = int(mask.sum())
    picked = T.mul(log_probs, Tensor(weights))
    return T.mul(T.sum_(picked), -1.0 / count)


def _critic_updates(critic, critic_opt, generator, classifier, codec, db, schema,
                    batch_images, rows, predictions, tc, gp_cfg, post_hoc, step, lr):
    probs_c, taps_c = classify(classifier, Tensor(batch_images), training=False)
    cond, diag_embs = _build_cond_tensor(rows, probs_c, taps_c["gap"], codec,
                                         tc.grammar, on_tape=False)
    fake = generator.forward(cond).data  # critic updates treat the generator as fixed
    for k in range(tc.critic_ratio):
        rng = _stream(tc.seed, 20, step, k)
        real = np.stack([db.matrix(d)[rng.integers(db.size)] for _i, d in rows])
        with Tape() as tape:
            loss = critic_loss(critic, real, fake, diag_embs, gp_cfg, rng)
        critic_opt.zero_grad()
        tape.backward(loss)
        critic_opt.step(lr=lr)


def _validation_loss(cfg, schema, codec, classifier, generator, text2img, critic,
                     frozen, db, val_images, weights, mmd_cfg):
    """Same weighted combination with the sigmas frozen at their current values."""
    tc = cfg.train
    batch_images = _pixel_batch(val_images)
    log_probs_c, taps_c = classifier.forward(Tensor(batch_images), training=False)
    probs_c = T.exp(log_probs_c)
    predictions = _predictions_from_probs(probs_c.data)
    rows = _conditioning_rows(schema, predictions)
    components = {}
    if tc.mode == "in_model":
        components["img_clf"] = image_classification_loss(
            log_probs_c, _target_matrix(val_images),
            class_weights_from_split(val_images, schema)).item()
    if rows:
        cond, diag_embs = _build_cond_tensor(rows, probs_c, taps_c["gap"], codec,
                                             tc.grammar, on_tape=False)
        fake = generator.forward(cond)
        if tc.plausibility == "mmd":
            components["plaus"] = _mmd_component(schema, rows, fake, db, mmd_cfg).item()
        else:
            components["plaus"] = generator_adv_loss(critic, fake, diag_embs).item()
        if tc.recons or tc.nle_clf:
            gen_images = text2img.forward(fake, training=False)
            if tc.recons:
                components["nle_recons"] = _recons_component(
                    frozen.model, batch_images, gen_images, rows, tc.tap).item()
            if tc.nle_clf:
                classes, mask, soft = _nle_targets_and_mask(
                    schema, rows, predictions, soft=tc.soft_targets)
                components["nle_clf"] = _nle_clf_component(
                    frozen.model, gen_images, classes, mask, soft).item()
    total = 0.0
    for name, value in components.items():
        sigma = weights.sigma_value(name)
        total += value / (2.0 * sigma**2) + np.log1p(sigma**2)
    return total


def _checkpoint_arrays(cfg, classifier, generator, text2img, critic, weights, opt, step):
    arrays = {}
    arrays.update(classifier.state_arrays("clf"))
    arrays.update(generator.state_arrays("gen"))
    arrays.update(text2img.state_arrays("t2i"))
    if critic is not None:
        arrays.update(critic.state_arrays("critic"))
    for name, p in weights.named_params():
        arrays[name] = p.data
    arrays.update(opt.state_arrays())
    arrays["meta/step"] = np.array([float(step)])
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}


def save_run_checkpoint(path, artifacts):
    save_checkpoint(path, artifacts.checkpoint)


def load_run_models(cfg, schema, codec, arrays):
    """Rebuild the trained models from checkpoint arrays."""
    tc = cfg.train
    classifier = Classifier(schema, seed=0)
    classifier.load_state_arrays(arrays, "clf")
    generator = Generator(schema, dim=codec.dim, seed=0)
    generator.load_state_arrays(arrays, "gen")
    text2img = TextEmbeddingToImage(schema, dim=codec.dim, seed=0)
    text2img.load_state_arrays(arrays, "t2i")
    critic = None
    if any(k.startswith("critic/") for k in arrays):
        critic = Critic(dim=codec.dim, seed=0)
        critic.load_state_arrays(arrays, "critic")
    return classifier, generator, text2img, critic


def _log_row(step, lr, values, weights, wall_ms):
    sigmas = []
    for name in SIGMA_ORDER:
        sigmas.append(repr(weights.sigma_value(name)) if name in weights.raw else "")
    return {
        "step": str(step),
        "lr": repr(lr),
        "plaus": repr(values["plaus"]) if "plaus" in values else "",
        "nle_clf": repr(values["nle_clf"]) if "nle_clf" in values else "",
        "nle_recons": repr(values["nle_recons"]) if "nle_recons" in values else "",
        "img_clf": repr(values["img_clf"]) if "img_clf" in values else "",
        "sigma1": sigmas[0], "sigma2": sigmas[1], "sigma3": sigmas[2], "sigma4": sigmas[3],
        "wall_ms": repr(wall_ms),
    }


def log_to_csv(log_rows):
    lines = [",".join(LOG_COLUMNS)]
    for row in log_rows:
        lines.append(",".join(row[c] for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# explanation generation

@dataclass(frozen=True)
class Explanation:
    image_index: int
    image_seed: int
    diagnosis: str
    embedding: np.ndarray
    tokens: tuple
    prediction: LabelVector
    target: LabelVector


def generate_explanations(schema, codec, classifier, generator, images, grammar_name="medical"):
    """One decoded explanation per (image, explained diagnosis) pair.

    Decoding searches every grammar the codec knows; training never decodes.
    """
    if not images:
        return [], {"total": 0, "correct": 0}
    probs_c, taps_c = classify(classifier, Tensor(_pixel_batch(images)), training=False)
    predictions = _predictions_from_probs(probs_c.data)
    rows = _conditioning_rows(schema, predictions)
    out = []
    correct = 0
    if rows:
        cond, _ = _build_cond_tensor(rows, probs_c, taps_c["gap"], codec,
                                     grammar_name, on_tape=False)
        fake = generator.forward(cond).data
        for r, (i, d) in enumerate(rows):
            sentence = codec.decode(fake[r])
            pred = predictions[i]
            out.append(Explanation(
                image_index=i, image_seed=images[i].seed, diagnosis=d,
                embedding=fake[r], tokens=sentence.tokens,
                prediction=pred, target=images[i].target,
            ))
            if _prediction_correct(schema, pred, images[i].target, d):
                correct += 1
    return out, {"total": len(out), "correct": correct}


def _prediction_correct(schema, pred, target, diagnosis):
    """Explained diagnosis class and every evidence state match ground truth."""
    d_idx = schema.label_index(diagnosis)
    if pred.states[d_idx] != target.states[d_idx]:
        return False
    n_diag = len(schema.diagnosis_labels)
    return pred.states[n_diag:] == target.states[n_diag:]
