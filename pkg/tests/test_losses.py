"""Loss tests: hand-derived MMD values, WGAN-GP closed forms, faithfulness
terms, and the uncertainty-weighted combination."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wenlex import tensor as T
from wenlex.codec import TextCodec
from wenlex.domain import DomainSchema, gt_sentence_for, LabelVector, POS
from wenlex.losses import (
    GpConfig, MmdConfig, NleDatabase, UncertaintyWeights,
    class_weights_from_split, combine_losses, critic_loss, generator_adv_loss,
    image_classification_loss, mmd_squared, nle_classification_loss,
    plausibility_mmd, reconstruction_loss,
)
from wenlex.models import Critic
from wenlex.tensor import Tape, Tensor

FIXED = MmdConfig(bandwidth="fixed", sigma=1.0)


class TestMmd:
    def test_identical_multisets_zero(self):
        x = np.random.default_rng(1).standard_normal((6, 4))
        val = mmd_squared(Tensor(x), Tensor(x.copy()), FIXED).item()
        assert abs(val) <= 1e-12

    def test_hand_value_one_point(self):
        # k(0,0) + k(2,2) - 2 k(0,2) with sigma=1: 2 - 2 e^{-2}
        val = mmd_squared(Tensor([[0.0]]), Tensor([[2.0]]), FIXED).item()
        assert abs(val - (2.0 - 2.0 * np.exp(-2.0))) < 1e-9
        assert val == pytest.approx(1.72933, abs=1e-5)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((5, 3)), rng.standard_normal((7, 3))
        a = mmd_squared(Tensor(x), Tensor(y), FIXED).item()
        b = mmd_squared(Tensor(y), Tensor(x), FIXED).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mmd_squared(Tensor(np.zeros((0, 3))), Tensor(np.zeros((2, 3))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 8))
    def test_nonnegative(self, seed, m, n):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((m, 3)), rng.standard_normal((n, 3))
        assert mmd_squared(Tensor(x), Tensor(y)).item() >= -1e-12

    def test_median_heuristic_degenerate_fallback(self):
        x = np.zeros((3, 2))
        val = mmd_squared(Tensor(x), Tensor(x.copy())).item()
        assert abs(val) <= 1e-12

    def test_direct_minimization(self):
        # moving X toward fixed Y by plain gradient descent shrinks MMD^2 >= 90%;
        # clouds sized so lr 0.05 covers the gap within the step budget
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((64, 2)) * 0.1 + 0.4, requires_grad=True)
        y = Tensor(rng.standard_normal((64, 2)) * 0.1)
        with Tape() as tape:
            initial = mmd_squared(x, y)
        final = None
        for _ in range(500):
            x.grad = None
            with Tape() as tape:
                loss = mmd_squared(x, y)
            tape.backward(loss)
            x.data = x.data - 0.05 * x.grad
            final = loss.item()
        assert final <= 0.1 * initial.item()


class TestPlausibility:
    def _db(self, codec, schema):
        entries = {}
        for d in schema.diagnosis_labels:
            states = [0] * schema.num_labels
            states[schema.label_index(d)] = POS
            states[schema.label_index(schema.primary_evidence[d])] = POS
            t = LabelVector(states=tuple(states))
            items = []
            for k in range(3):
                s = gt_sentence_for(schema, t, d, style_seed=k)
                items.append((s.tokens, codec.embed(s.tokens)))
            entries[d] = items
        return NleDatabase(entries=entries)

    def test_exact_match_zero(self):
        schema = DomainSchema()
        codec = TextCodec(schema, dim=16, seed=5)
        db = self._db(codec, schema)
        gen = {d: Tensor(db.matrix(d)) for d in schema.diagnosis_labels}
        assert abs(plausibility_mmd(gen, db, FIXED).item()) <= 1e-12

    def test_single_label_equals_direct(self):
        schema = DomainSchema()
        codec = TextCodec(schema, dim=16, seed=5)
        db = self._db(codec, schema)
        rng = np.random.default_rng(7)
        gen = Tensor(rng.standard_normal((4, 16)))
        via_plaus = plausibility_mmd({"alpha": gen}, db, FIXED).item()
        direct = mmd_squared(gen, Tensor(db.matrix("alpha")), FIXED).item()
        assert via_plaus == pytest.approx(direct, abs=1e-12)

    def test_two_labels_average(self):
        schema = DomainSchema()
        codec = TextCodec(schema, dim=16, seed=5)
        db = self._db(codec, schema)
        rng = np.random.default_rng(8)
        ga, gb = Tensor(rng.standard_normal((4, 16))), Tensor(rng.standard_normal((2, 16)))
        combo = plausibility_mmd({"alpha": ga, "beta": gb}, db, FIXED).item()
        sep = (mmd_squared(ga, Tensor(db.matrix("alpha")), FIXED).item()
               + mmd_squared(gb, Tensor(db.matrix("beta")), FIXED).item()) / 2.0
        assert combo == pytest.approx(sep, abs=1e-12)

    def test_missing_db_label_rejected(self):
        schema = DomainSchema()
        codec = TextCodec(schema, dim=16, seed=5)
        db = self._db(codec, schema)
        with pytest.raises(KeyError):
            plausibility_mmd({"nosuch": Tensor(np.zeros((1, 16)))}, db, FIXED)


class _LinearCritic:
    """Critic-shaped adapter around a fixed linear map on the embedding part."""

    def __init__(self, w):
        self.w = Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1), requires_grad=True)

    def forward(self, emb, diag_emb):
        return T.matmul(emb, self.w)

    def detached(self):
        frozen = _LinearCritic(self.w.data)
        frozen.w.requires_grad = False
        return frozen


class TestCriticLoss:
    def test_unit_norm_weight_zero_penalty(self):
        rng = np.random.default_rng(1)
        w = np.zeros(4)
        w[0] = 1.0
        critic = _LinearCritic(w)
        real, fake = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        diag = rng.standard_normal((5, 4))
        with Tape():
            loss = critic_loss(critic, real, fake, diag, GpConfig(gp_lambda=7.0), rng)
        expect = np.mean(fake @ w) - np.mean(real @ w)
        assert loss.item() == pytest.approx(expect, abs=1e-9)

    def test_weight_two_penalty_lambda(self):
        rng = np.random.default_rng(2)
        w = np.zeros(4)
        w[0] = 2.0
        critic = _LinearCritic(w)
        real, fake = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        diag = rng.standard_normal((5, 4))
        lam = 10.0
        with Tape():
            loss = critic_loss(critic, real, fake, diag, GpConfig(gp_lambda=lam), rng)
        expect = np.mean(fake @ w) - np.mean(real @ w) + lam * (2.0 - 1.0) ** 2
        assert loss.item() == pytest.approx(expect, abs=1e-9)

    def test_real_equals_fake_leaves_penalty_only(self):
        rng = np.random.default_rng(3)
        critic = Critic(dim=8, seed=4)
        batch = rng.standard_normal((6, 8))
        diag = rng.standard_normal((6, 8))
        with Tape():
            loss = critic_loss(critic, batch, batch.copy(), diag, GpConfig(10.0), rng)
        with Tape():
            pen_only = critic_loss(critic, batch, batch.copy(), diag, GpConfig(10.0),
                                   np.random.default_rng(3))
        assert loss.item() >= 0.0
        assert loss.item() == pytest.approx(pen_only.item(), abs=1e-9)

    def test_mismatched_batches_rejected(self):
        critic = Critic(dim=4, seed=5)
        with Tape():
            with pytest.raises(ValueError):
                critic_loss(critic, np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((3, 4)))

    def test_penalty_grads_reach_critic_params(self):
        rng = np.random.default_rng(6)
        critic = Critic(dim=8, seed=7)
        real, fake = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
        diag = rng.standard_normal((6, 8))
        with Tape() as tape:
            loss = critic_loss(critic, real, fake, diag, GpConfig(10.0), rng)
        tape.backward(loss)
        grads = [p.grad for _, p in critic.named_params()]
        assert all(g is not None for g in grads[:4])  # weights and early biases


class TestGeneratorAdvLoss:
    class _ConstCritic:
        def __init__(self, c):
            self.c = c

        def forward(self, emb, diag_emb):
            zero = T.mul(T.sum_(emb, axis=1, keepdims=True), 0.0)
            return T.add(zero, self.c)

        def detached(self):
            return self

    def test_constant_critic(self):
        fake = Tensor(np.random.default_rng(1).standard_normal((4, 8)), requires_grad=True)
        with Tape() as tape:
            loss = generator_adv_loss(self._ConstCritic(2.5), fake, np.zeros((4, 8)))
        assert loss.item() == pytest.approx(-2.5)
        tape.backward(loss)
        assert np.allclose(fake.grad, 0.0)

    def test_batch_mean(self):
        critic = _LinearCritic([1.0, 0.0])
        fake = Tensor(np.array([[1.0, 0.0], [3.0, 0.0]]))
        with Tape():
            loss = generator_adv_loss(critic, fake, np.zeros((2, 2)))
        assert loss.item() == pytest.approx(-2.0)

    def test_critic_params_detached(self):
        critic = Critic(dim=8, seed=9)
        fake = Tensor(np.random.default_rng(2).standard_normal((3, 8)), requires_grad=True)
        with Tape() as tape:
            loss = generator_adv_loss(critic, fake, np.zeros((3, 8)))
        tape.backward(loss)
        assert fake.grad is not None
        assert all(p.grad is None for _, p in critic.named_params())

    def test_sign(self):
        critic = _LinearCritic([1.0])
        low = Tensor(np.array([[1.0]]))
        high = Tensor(np.array([[2.0]]))
        with Tape():
            l_low = generator_adv_loss(critic, low, np.zeros((1, 1)))
        with Tape():
            l_high = generator_adv_loss(critic, high, np.zeros((1, 1)))
        assert l_high.item() < l_low.item()


class _IdentityTap:
    """Frozen-model stub whose block2 tap is the flattened image."""

    def forward(self, images, training=False):
        images = T.as_tensor(images)
        b = images.shape[0]
        return None, {"block2": T.reshape(images, (b, -1))}


class TestReconstruction:
    def test_identical_image_zero(self):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((1, 1, 4, 4))
        with Tape():
            loss = reconstruction_loss(_IdentityTap(), img, Tensor(img.copy()),
                                       [(0, 0, 1)], tap="block2")
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_mean_of_two_matching_original(self):
        rng = np.random.default_rng(2)
        orig = rng.standard_normal((1, 1, 4, 4))
        delta = rng.standard_normal((1, 1, 4, 4))
        gen = np.concatenate([orig + delta, orig - delta], axis=0)
        with Tape():
            loss = reconstruction_loss(_IdentityTap(), orig, Tensor(gen),
                                       [(0, 0, 2)], tap="block2")
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(3)
        orig = rng.standard_normal((1, 1, 4, 4))
        gap = rng.standard_normal((1, 1, 4, 4))
        with Tape():
            l1 = reconstruction_loss(_IdentityTap(), orig, Tensor(orig + gap), [(0, 0, 1)])
        with Tape():
            l2 = reconstruction_loss(_IdentityTap(), orig, Tensor(orig + 2 * gap), [(0, 0, 1)])
        assert l2.item() == pytest.approx(4.0 * l1.item(), rel=1e-9)

    def test_no_groups_rejected(self):
        with pytest.raises(ValueError):
            reconstruction_loss(_IdentityTap(), np.zeros((1, 1, 2, 2)),
                                Tensor(np.zeros((1, 1, 2, 2))), [])


class _FixedLogits:
    """Frozen-model stub returning preset per-label logits for every image."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def forward(self, images, training=False):
        images = T.as_tensor(images)
        b = images.shape[0]
        reps = Tensor(np.tile(self.logits[None], (b, 1, 1)))
        carrier = T.mul(T.mean(images), 0.0)  # keep the graph connected
        logits = T.add(reps, T.broadcast_to(T.reshape(carrier, (1, 1, 1)), reps.shape))
        return T.log_softmax(logits), {}


class TestNleClassification:
    def test_uniform_single_label_ln3(self):
        stub = _FixedLogits(np.zeros((5, 3)))
        mask = np.zeros((1, 5), dtype=bool)
        mask[0, 2] = True
        targets = np.zeros((1, 5), dtype=int)
        with Tape():
            loss = nle_classification_loss(stub, Tensor(np.zeros((1, 1, 2, 2))), targets, mask)
        assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)

    def test_masked_labels_ignored(self):
        logits = np.zeros((5, 3))
        stub_a = _FixedLogits(logits)
        perturbed = logits.copy()
        perturbed[4] = [5.0, -3.0, 1.0]  # label 4 stays masked
        stub_b = _FixedLogits(perturbed)
        mask = np.zeros((1, 5), dtype=bool)
        mask[0, 0] = True
        targets = np.ones((1, 5), dtype=int)
        img = Tensor(np.zeros((1, 1, 2, 2)))
        with Tape():
            a = nle_classification_loss(stub_a, img, targets, mask)
        with Tape():
            b = nle_classification_loss(stub_b, img, targets, mask)
        assert a.item() == b.item()

    def test_perfect_prediction_near_zero(self):
        logits = np.zeros((5, 3))
        logits[:, 1] = 30.0
        stub = _FixedLogits(logits)
        mask = np.ones((1, 5), dtype=bool)
        targets = np.ones((1, 5), dtype=int)
        with Tape():
            loss = nle_classification_loss(stub, Tensor(np.zeros((1, 1, 2, 2))), targets, mask)
        assert loss.item() < 1e-9


class TestImageClassification:
    def test_uniform_unit_weights_ln3(self):
        log_probs = Tensor(np.full((2, 5, 3), np.log(1.0 / 3.0)))
        loss = image_classification_loss(log_probs, np.zeros((2, 5), dtype=int), np.ones((5, 3)))
        assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)

    def test_perfect_prediction_near_zero(self):
        logits = np.zeros((2, 5, 3))
        logits[:, :, 2] = 40.0
        log_probs = T.log_softmax(Tensor(logits))
        loss = image_classification_loss(log_probs, np.full((2, 5), 2), np.ones((5, 3)))
        assert loss.item() < 1e-12

    def test_doubling_weight_doubles_contribution(self):
        log_probs = Tensor(np.full((1, 5, 3), np.log(1.0 / 3.0)))
        targets = np.zeros((1, 5), dtype=int)
        w = np.ones((5, 3))
        base = image_classification_loss(log_probs, targets, w).item()
        w2 = w.copy()
        w2[0, 0] = 2.0
        doubled = image_classification_loss(log_probs, targets, w2).item()
        # label 0's term doubles, the other four stay put
        assert doubled == pytest.approx(base + np.log(3.0) / 5.0, abs=1e-12)

    def test_class_weights_from_split(self):
        schema = DomainSchema()
        from wenlex.domain import LabelPrior, sample_dataset
        images = sample_dataset(schema, 100, LabelPrior.default(schema), seed=1)
        w = class_weights_from_split(images, schema)
        assert w.shape == (5, 3)
        assert np.all(w > 0)
        assert np.allclose(np.mean(w, axis=1), 1.0)


class TestCombineLosses:
    def _components(self, values):
        return {k: Tensor(np.asarray(v)) for k, v in values.items()}

    def test_post_hoc_sigma_one(self):
        comps = self._components({"plaus": 0.5, "nle_clf": 1.5, "nle_recons": 2.0})
        weights = UncertaintyWeights("post_hoc")
        total = combine_losses(comps, weights, "post_hoc").item()
        assert total == pytest.approx((0.5 + 1.5 + 2.0) / 2.0 + 3.0 * np.log(2.0), abs=1e-12)

    def test_in_model_sigma_one(self):
        comps = self._components({"plaus": 1.0, "nle_clf": 1.0, "nle_recons": 1.0, "img_clf": 1.0})
        weights = UncertaintyWeights("in_model")
        total = combine_losses(comps, weights, "in_model").item()
        assert total == pytest.approx(2.0 + 4.0 * np.log(2.0), abs=1e-12)

    def test_zero_losses_value(self):
        comps = self._components({"plaus": 0.0, "nle_clf": 0.0, "nle_recons": 0.0})
        weights = UncertaintyWeights("post_hoc")
        total = combine_losses(comps, weights, "post_hoc").item()
        assert total == pytest.approx(3.0 * np.log(2.0), abs=1e-12)

    def test_missing_img_clf_rejected(self):
        comps = self._components({"plaus": 1.0})
        with pytest.raises(ValueError):
            combine_losses(comps, UncertaintyWeights("in_model"), "in_model")

    def test_img_clf_in_post_hoc_rejected(self):
        comps = self._components({"plaus": 1.0, "img_clf": 1.0})
        with pytest.raises(ValueError):
            combine_losses(comps, UncertaintyWeights("post_hoc"), "post_hoc")

    def test_sigma_gradient_matches_analytic(self):
        rng = np.random.default_rng(4)
        weights = UncertaintyWeights("post_hoc")
        for name in weights.raw:
            weights.raw[name].data = rng.uniform(-0.5, 0.5, size=())
        values = {"plaus": 0.7, "nle_clf": 1.3, "nle_recons": 0.2}
        comps = self._components(values)
        with Tape() as tape:
            total = combine_losses(comps, weights, "post_hoc")
        tape.backward(total)
        for name, raw in weights.raw.items():
            sigma = np.exp(raw.data)
            analytic = -values[name] / sigma**3 + 2.0 * sigma / (1.0 + sigma**2)
            got = raw.grad / sigma  # chain rule: d/draw = d/dsigma * sigma
            assert abs(got - analytic) < 1e-9

    def test_partial_components_allowed(self):
        comps = self._components({"plaus": 2.0})
        weights = UncertaintyWeights("post_hoc")
        total = combine_losses(comps, weights, "post_hoc").item()
        assert total == pytest.approx(1.0 + np.log(2.0), abs=1e-12)


class TestDatabase:
    def test_unequal_sizes_rejected(self):
        with pytest.raises(ValueError):
            NleDatabase(entries={"a": [(("x",), np.zeros(2))],
                                 "b": [(("x",), np.zeros(2)), (("y",), np.zeros(2))]})

    def test_json_roundtrip(self):
        schema = DomainSchema()
        codec = TextCodec(schema, dim=8, seed=1)
        s = codec.sentences("medical")[0]
        db = NleDatabase(entries={"alpha": [(s.tokens, codec.embed(s.tokens))]})
        back = NleDatabase.from_json(db.to_json())
        assert back.grammar_name == db.grammar_name
        assert back.entries["alpha"][0][0] == s.tokens
        assert np.allclose(back.entries["alpha"][0][1], db.entries["alpha"][0][1])

    def test_single_diagnosis_validation(self):
        schema = DomainSchema()
        codec = TextCodec(schema, dim=8, seed=1)
        g = schema.grammar("medical")
        bad = ("pronounced", g.evidence_nouns["shade"], "in", "the", "upper", "left",
               "suggesting", g.diagnosis_nouns["alpha"], g.diagnosis_nouns["beta"])
        db = NleDatabase(entries={"alpha": [(bad, codec.embed(bad))]})
        with pytest.raises(ValueError):
            db.validate_single_diagnosis(schema)
