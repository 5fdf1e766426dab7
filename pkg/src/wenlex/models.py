"""Trainable networks: the classifier being explained, the conditioned NLE
generator, the critic, and the embedding-to-image upsampler, plus the frozen
classifier copy and the binary checkpoint container shared by all of them."""

import copy
import hashlib
import struct

import numpy as np

from . import tensor as T
from .domain import NEG
from .tensor import Tensor

TAP_NAMES = ("block1", "block2", "block3", "gap", "heads")


def _he(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, n_in, n_out):
        self.w = _he(rng, (n_in, n_out), n_in)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        out = T.matmul(x, self.w)
        return T.add(out, T.broadcast_to(self.b, out.shape))

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Conv:
    def __init__(self, rng, c_in, c_out, k, stride, padding):
        self.kernel = _he(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return T.conv2d(x, self.kernel, bias=self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]


class ConvTranspose:
    def __init__(self, rng, c_in, c_out, k, stride, padding):
        # kernel layout (c_in, c_out, k, k): the adjoint of a conv with that kernel
        self.kernel = _he(rng, (c_in, c_out, k, k), c_in * k * k)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return T.conv_transpose2d(x, self.kernel, bias=self.bias,
                                  stride=self.stride, padding=self.padding)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]


class BatchNorm:
    def __init__(self, c):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def __call__(self, x, training):
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training=training)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Model:
    """Shared plumbing: named parameters, freezing, state arrays, hashing."""

    def _modules(self):
        raise NotImplementedError

    def named_params(self):
        out = []
        for mod_name, mod in self._modules():
            for p_name, p in mod.params():
                out.append((f"{mod_name}.{p_name}", p))
        return out

    def named_buffers(self):
        out = []
        for mod_name, mod in self._modules():
            if hasattr(mod, "buffers"):
                for b_name, b in mod.buffers():
                    out.append((f"{mod_name}.{b_name}", b))
        return out

    def set_requires_grad(self, flag):
        for _, p in self.named_params():
            p.requires_grad = flag

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad = None

    def state_arrays(self, prefix):
        out = {}
        for name, p in self.named_params():
            out[f"{prefix}/{name}"] = p.data
        for name, b in self.named_buffers():
            out[f"{prefix}/buf/{name}"] = b
        return out

    def load_state_arrays(self, arrays, prefix):
        for name, p in self.named_params():
            p.data = arrays[f"{prefix}/{name}"].copy()
        for mod_name, mod in self._modules():
            if hasattr(mod, "buffers"):
                for b_name, b in mod.buffers():
                    b[:] = arrays[f"{prefix}/buf/{mod_name}.{b_name}"]

    def clone(self):
        other = copy.deepcopy(self)
        return other

    def params_sha256(self):
        h = hashlib.sha256()
        for name, p in sorted(self.named_params()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for name, b in sorted(self.named_buffers()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


class Classifier(Model):
    """Conv stack with per-label 3-class heads and named feature taps."""

    def __init__(self, schema, seed):
        rng = np.random.default_rng(np.uint64(seed))
        self.schema = schema
        self.num_labels = schema.num_labels
        self.conv1 = Conv(rng, schema.image_shape[0], 8, k=3, stride=2, padding=1)
        self.bn1 = BatchNorm(8)
        self.conv2 = Conv(rng, 8, 16, k=3, stride=2, padding=1)
        self.bn2 = BatchNorm(16)
        self.conv3 = Conv(rng, 16, 32, k=3, stride=2, padding=1)
        self.bn3 = BatchNorm(32)
        self.heads = Linear(rng, 32, self.num_labels * 3)

    def _modules(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
                ("bn2", self.bn2), ("conv3", self.conv3), ("bn3", self.bn3),
                ("heads", self.heads)]

    def forward(self, x, training=False):
        """Returns (log_probs (b,L,3), taps dict of flattened features)."""
        if tuple(x.shape[1:]) != tuple(self.schema.image_shape):
            raise T.ShapeError(f"image shape {x.shape[1:]} != {self.schema.image_shape}")
        b = x.shape[0]
        h1 = T.relu(self.bn1(self.conv1(x), training))
        h2 = T.relu(self.bn2(self.conv2(h1), training))
        h3 = T.relu(self.bn3(self.conv3(h2), training))
        gap = T.mean(h3, axis=(2, 3))
        logits = self.heads(gap)
        log_probs = T.log_softmax(T.reshape(logits, (b, self.num_labels, 3)))
        taps = {
            "block1": T.reshape(h1, (b, -1)),
            "block2": T.reshape(h2, (b, -1)),
            "block3": T.reshape(h3, (b, -1)),
            "gap": gap,
            "heads": logits,
        }
        return log_probs, taps


def classify(classifier, images, training=False):
    """Per-label probability triples plus feature taps for a batch."""
    log_probs, taps = classifier.forward(images, training=training)
    probs = T.exp(log_probs)
    return probs, taps


def explained_diagnoses(schema, prediction):
    """Diagnosis labels predicted uncertain or positive, in schema order."""
    out = []
    for i, lb in enumerate(schema.diagnosis_labels):
        if prediction.states[i] != NEG:
            out.append(lb)
    return out


class Generator(Model):
    """MLP over concat(classifier gap features, prediction vector, diagnosis embedding)."""

    def __init__(self, schema, dim, seed, hidden=128):
        rng = np.random.default_rng(np.uint64(seed))
        n_in = 32 + schema.num_labels * 3 + dim
        self.dim = dim
        self.fc1 = Linear(rng, n_in, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.fc3 = Linear(rng, hidden, dim)

    def _modules(self):
        return [("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3)]

    def forward(self, cond):
        h = T.leaky_relu(self.fc1(cond), 0.2)
        h = T.leaky_relu(self.fc2(h), 0.2)
        return self.fc3(h)


def generate_nle(generator, gap_row, probs_row, diag_embedding):
    """Embedding for one (image, explained diagnosis) pair; inputs as constants."""
    cond = np.concatenate([gap_row, probs_row.reshape(-1), diag_embedding])
    out = generator.forward(Tensor(cond[None, :]))
    return out.data[0]


class Critic(Model):
    """Scalar score over concat(NLE embedding, diagnosis embedding); no batchnorm."""

    def __init__(self, dim, seed):
        rng = np.random.default_rng(np.uint64(seed))
        self.dim = dim
        self.fc1 = Linear(rng, 2 * dim, dim)
        self.fc2 = Linear(rng, dim, dim // 2)
        self.fc3 = Linear(rng, dim // 2, 1)

    def _modules(self):
        return [("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3)]

    def forward(self, emb, diag_emb):
        x = T.concat([emb, diag_emb], axis=1)
        h = T.leaky_relu(self.fc1(x), 0.2)
        h = T.leaky_relu(self.fc2(h), 0.2)
        return self.fc3(h)

    def detached(self):
        frozen = self.clone()
        frozen.set_requires_grad(False)
        return frozen


class TextEmbeddingToImage(Model):
    """Upsamples an NLE embedding to a full image in [-1, 1].

    Linear projection to a 32x4x4 map, then stride-2 transposed convolutions
    doubling resolution while halving channels (4 -> 8 -> 16 -> 32), batch
    norm + ReLU between, final tanh.
    """

    def __init__(self, schema, dim, seed):
        rng = np.random.default_rng(np.uint64(seed))
        self.schema = schema
        self.proj = Linear(rng, dim, 32 * 4 * 4)
        self.up1 = ConvTranspose(rng, 32, 16, k=4, stride=2, padding=1)
        self.bn1 = BatchNorm(16)
        self.up2 = ConvTranspose(rng, 16, 8, k=4, stride=2, padding=1)
        self.bn2 = BatchNorm(8)
        self.up3 = ConvTranspose(rng, 8, schema.image_shape[0], k=4, stride=2, padding=1)

    def _modules(self):
        return [("proj", self.proj), ("up1", self.up1), ("bn1", self.bn1),
                ("up2", self.up2), ("bn2", self.bn2), ("up3", self.up3)]

    def forward(self, emb, training=False):
        b = emb.shape[0]
        h = T.relu(self.proj(emb))
        h = T.reshape(h, (b, 32, 4, 4))
        h = T.relu(self.bn1(self.up1(h), training))
        h = T.relu(self.bn2(self.up2(h), training))
        return T.tanh(self.up3(h))


class FrozenCopy:
    """Periodically synced snapshot of the classifier; never receives gradients."""

    def __init__(self, classifier):
        self.model = classifier.clone()
        self.model.set_requires_grad(False)
        self.last_sync_step = 0

    def maybe_sync(self, classifier, step, period, post_hoc=False):
        """Replace the snapshot iff step is a sync point; no-op when post hoc."""
        if post_hoc:
            return False
        if step % period == 0:
            arrays = classifier.state_arrays("clf")
            self.model.load_state_arrays(arrays, "clf")
            self.model.set_requires_grad(False)
            self.last_sync_step = step
            return True
        return False


def sync_frozen_copy(copy_, classifier, step, period=1000, post_hoc=False):
    copy_.maybe_sync(classifier, step, period, post_hoc=post_hoc)
    return copy_


# ---------------------------------------------------------------------------
# checkpoint container: magic "WNLX", version u16, then a sorted table of
# (utf8 name, shape, little-endian f64 data) entries

CHECKPOINT_MAGIC = b"WNLX"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            arrays[name] = data.copy()
        return arrays
