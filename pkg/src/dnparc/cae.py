"""1-D convolutional autoencoder with hand-written reverse-mode gradients.

Tensors are laid out as ``(batch, length, channels)`` for sequence layers and
``(batch, features)`` for dense layers. All arithmetic is float64.

Encoder: 6x1 -> conv(32,k6,s2) -> 3x32 -> conv(64,k4,s2) -> 2x64
         -> conv(128,k2,s2) -> 1x128 -> flatten -> dense(36), ReLU throughout.
Decoder mirrors it with transposed convolutions cropped to lengths 2, 3, 6.
"""

import math

import numpy as np

from .errors import InvalidInputError

INPUT_DIM = 6
EMBED_DIM = 36
LOSSES = ("reconstruction", "clustering", "total")


# -- layers ---------------------------------------------------------------------
#
# Every layer exposes ``forward(x) -> (y, cache)`` and
# ``backward(cache, gy) -> (gx, {param: grad})``. Layers never keep state from a
# forward pass, so a model can be shared by concurrent readers.

class Layer:
    kind = None
    params = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError

    def out_shape(self, in_shape):
        y, _ = self.forward(np.zeros((1,) + tuple(in_shape)))
        return y.shape[1:]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache, gy):
        return gy * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, cache, gy):
        return gy.reshape(cache), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape((len(x),) + self.shape), x.shape

    def backward(self, cache, gy):
        return gy.reshape(cache), {}


class Crop(Layer):
    """Keep the first ``length`` positions of a sequence."""
    kind = "crop"

    def __init__(self, length):
        self.length = length

    def forward(self, x):
        if x.shape[1] < self.length:
            raise InvalidInputError(f"cannot crop length {x.shape[1]} to {self.length}")
        return x[:, :self.length], x.shape

    def backward(self, cache, gy):
        gx = np.zeros(cache)
        gx[:, :self.length] = gy
        return gx, {}


class Dense(Layer):
    kind = "dense"
    params = ("W", "b")

    def __init__(self, n_in, n_out):
        self.W = np.zeros((n_in, n_out))
        self.b = np.zeros(n_out)

    def fans(self):
        return self.W.shape

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, x, gy):
        return gy @ self.W.T, {"W": x.T @ gy, "b": gy.sum(axis=0)}


class Conv1D(Layer):
    """Strided convolution with TensorFlow-style 'same' padding, out = ceil(L / stride)."""
    kind = "conv1d"
    params = ("W", "b")

    def __init__(self, n_in, n_out, kernel, stride):
        self.kernel, self.stride = kernel, stride
        self.W = np.zeros((kernel, n_in, n_out))
        self.b = np.zeros(n_out)

    def fans(self):
        k, cin, cout = self.W.shape
        return k * cin, k * cout

    def _padding(self, length):
        out = -(-length // self.stride)
        total = max((out - 1) * self.stride + self.kernel - length, 0)
        return out, total // 2, total - total // 2

    def forward(self, x):
        n, length, cin = x.shape
        out, left, right = self._padding(length)
        xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
        rows = self.stride * np.arange(out)[:, None] + np.arange(self.kernel)
        cols = xp[:, rows].reshape(n * out, self.kernel * cin)
        y = cols @ self.W.reshape(-1, self.W.shape[2]) + self.b
        return y.reshape(n, out, -1), (cols, xp.shape, left, length)

    def backward(self, cache, gy):
        cols, padded, left, length = cache
        n, out, cout = gy.shape
        gy2 = gy.reshape(n * out, cout)
        gW = (cols.T @ gy2).reshape(self.W.shape)
        gcols = (gy2 @ self.W.reshape(-1, cout).T).reshape(n, out, self.kernel, -1)
        gxp = np.zeros(padded)
        span = self.stride * (out - 1) + 1
        for t in range(self.kernel):
            gxp[:, t:t + span:self.stride] += gcols[:, :, t]
        return gxp[:, left:left + length], {"W": gW, "b": gy2.sum(axis=0)}


class ConvTranspose1D(Layer):
    """Transposed convolution producing ``stride * L`` positions ('same' output)."""
    kind = "transposed-conv1d"
    params = ("W", "b")

    def __init__(self, n_in, n_out, kernel, stride):
        self.kernel, self.stride = kernel, stride
        self.W = np.zeros((kernel, n_in, n_out))
        self.b = np.zeros(n_out)

    def fans(self):
        k, cin, cout = self.W.shape
        return k * cin, k * cout

    def _stacked(self):
        # (cin, kernel * cout): one GEMM produces every kernel tap at once
        return self.W.transpose(1, 0, 2).reshape(self.W.shape[1], -1)

    def forward(self, x):
        n, length, cin = x.shape
        k, _, cout = self.W.shape
        full = self.stride * (length - 1) + k
        span = self.stride * (length - 1) + 1
        z = (x.reshape(n * length, cin) @ self._stacked()).reshape(n, length, k, cout)
        y = np.zeros((n, full, cout))
        for t in range(k):
            y[:, t:t + span:self.stride] += z[:, :, t]
        off = max(k - self.stride, 0) // 2
        return y[:, off:off + self.stride * length] + self.b, (x, off, full)

    def backward(self, cache, gy):
        x, off, full = cache
        n, length, cin = x.shape
        k, _, cout = self.W.shape
        span = self.stride * (length - 1) + 1
        gfull = np.zeros((n, full, cout))
        gfull[:, off:off + gy.shape[1]] = gy
        gz = np.empty((n, length, k, cout))
        for t in range(k):
            gz[:, :, t] = gfull[:, t:t + span:self.stride]
        gz = gz.reshape(n * length, k * cout)
        x2 = x.reshape(n * length, cin)
        gx = (gz @ self._stacked().T).reshape(x.shape)
        gW = (x2.T @ gz).reshape(cin, k, cout).transpose(1, 0, 2)
        return gx, {"W": np.ascontiguousarray(gW), "b": gy.sum(axis=(0, 1))}


LAYER_KINDS = {cls.kind: cls for cls in (ReLU, Flatten, Reshape, Crop, Dense, Conv1D, ConvTranspose1D)}


def run_forward(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def run_backward(layers, caches, gy, prefix):
    grads = {}
    for idx in range(len(layers) - 1, -1, -1):
        gy, g = layers[idx].backward(caches[idx], gy)
        for name, value in g.items():
            grads[f"{prefix}{idx}.{name}"] = value
    return gy, grads


# -- model ----------------------------------------------------------------------

def _encoder_layers():
    return [
        Conv1D(1, 32, 6, 2), ReLU(),
        Conv1D(32, 64, 4, 2), ReLU(),
        Conv1D(64, 128, 2, 2), ReLU(),
        Flatten(),
        Dense(128, EMBED_DIM), ReLU(),
    ]


def _decoder_layers():
    return [
        Dense(EMBED_DIM, 128), ReLU(),
        Reshape((1, 128)),
        ConvTranspose1D(128, 64, 2, 2), Crop(2), ReLU(),
        ConvTranspose1D(64, 32, 4, 2), Crop(3), ReLU(),
        ConvTranspose1D(32, 1, 6, 2), Crop(6), ReLU(),
    ]


def _as_batch(x, width, what):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(1, -1) if single else arr
    if arr.ndim != 2 or arr.shape[1] != width:
        raise InvalidInputError(f"{what} must have {width} components, got shape {np.shape(x)}")
    if len(arr) == 0:
        raise InvalidInputError(f"empty {what} batch")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"non-finite {what}")
    return arr, single


class CaeModel:
    """Encoder/decoder weights plus the seed they were initialised from."""

    def __init__(self, seed=0):
        self.seed = seed
        self.epochs = 0
        self.encoder = _encoder_layers()
        self.decoder = _decoder_layers()
        rng = np.random.default_rng(seed)
        for layer in self.encoder + self.decoder:
            if layer.params:
                fan_in, fan_out = layer.fans()
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)

    def parameters(self):
        """Ordered ``{name: array}``; arrays are the live weights."""
        out = {}
        for prefix, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for idx, layer in enumerate(layers):
                for p in layer.params:
                    out[f"{prefix}{idx}.{p}"] = getattr(layer, p)
        return out

    def copy(self):
        clone = CaeModel.__new__(CaeModel)
        clone.seed, clone.epochs = self.seed, self.epochs
        clone.encoder, clone.decoder = _encoder_layers(), _decoder_layers()
        theirs = clone.parameters()
        for name, value in self.parameters().items():
            theirs[name][...] = value
        return clone

    def equals(self, other):
        a, b = self.parameters(), other.parameters()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def encode(self, x):
        """Embed one length-6 vector or an (N, 6) batch; output is >= 0."""
        arr, single = _as_batch(x, INPUT_DIM, "input")
        f, _ = run_forward(self.encoder, arr[:, :, None])
        return f[0] if single else f

    def decode(self, f):
        arr, single = _as_batch(f, EMBED_DIM, "embedding")
        y, _ = run_forward(self.decoder, arr)
        y = y[:, :, 0]
        return y[0] if single else y

    def reconstruct(self, x):
        return self.decode(self.encode(x))

    # -- checkpoint ---------------------------------------------------------

    def to_dict(self):
        layers = []
        for prefix, stack in (("encoder", self.encoder), ("decoder", self.decoder)):
            for layer in stack:
                entry = {"stack": prefix, "kind": layer.kind}
                for p in layer.params:
                    entry[p] = getattr(layer, p)
                layers.append(entry)
        return {
            "config": {"input_dim": INPUT_DIM, "embedding_dim": EMBED_DIM,
                       "seed": int(self.seed), "epochs": int(self.epochs)},
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, data):
        model = cls.__new__(cls)
        cfg = data["config"]
        if cfg.get("input_dim") != INPUT_DIM or cfg.get("embedding_dim") != EMBED_DIM:
            raise InvalidInputError("checkpoint dims do not match the fixed architecture")
        model.seed, model.epochs = cfg["seed"], cfg["epochs"]
        model.encoder, model.decoder = _encoder_layers(), _decoder_layers()
        stored = iter(data["layers"])
        for layer in model.encoder + model.decoder:
            entry = next(stored, None)
            if entry is None or entry["kind"] != layer.kind:
                raise InvalidInputError("checkpoint layer list does not match architecture")
            for p in layer.params:
                value = np.asarray(entry[p], dtype=np.float64)
                target = getattr(layer, p)
                if value.shape != target.shape:
                    raise InvalidInputError(f"checkpoint {layer.kind}.{p} has shape {value.shape}")
                target[...] = value
        return model


# -- losses and gradients ---------------------------------------------------------

def reconstruction_loss(batch, model):
    """Mean squared reconstruction error over the batch and the 6 components."""
    x, _ = _as_batch(batch, INPUT_DIM, "input")
    return float(np.mean((model.reconstruct(x) - x) ** 2))


def kl_rows(P, H, floor=1e-12):
    """Per-row KL(p || h) for row-stochastic matrices, with 0 log 0 = 0."""
    Hc = np.maximum(H, floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(Hc)), 0.0)
    return terms.sum(axis=1)


def loss_and_gradient(batch, model, loss="reconstruction", head=None, target=None, gamma=0.1):
    """Loss value, its parts, and exact gradients for every parameter.

    ``head`` is a clustering layer (an NMF or Student-t head) mapping embeddings to
    row-stochastic soft labels; ``target`` holds the matching rows of the target
    distribution. The clustering loss is the batch mean of KL(target || soft labels).
    ``total`` is reconstruction + gamma * clustering. Head gradients are keyed
    ``head.<name>``.
    """
    if loss not in LOSSES:
        raise InvalidInputError(f"loss must be one of {LOSSES}, got {loss!r}")
    x, _ = _as_batch(batch, INPUT_DIM, "input")
    n = len(x)
    use_rec = loss in ("reconstruction", "total")
    use_clu = loss in ("clustering", "total")
    if use_clu and (head is None or target is None):
        raise InvalidInputError("clustering loss needs a head and target rows")

    f, enc_caches = run_forward(model.encoder, x[:, :, None])
    grads = {}
    g_f = np.zeros_like(f)
    parts = {"reconstruction": 0.0, "clustering": 0.0}

    if use_rec:
        y, dec_caches = run_forward(model.decoder, f)
        diff = y[:, :, 0] - x
        parts["reconstruction"] = float(np.mean(diff ** 2))
        g_y = (2.0 / diff.size) * diff[:, :, None]
        g_f_rec, g_dec = run_backward(model.decoder, dec_caches, g_y, "dec")
        grads.update(g_dec)
        g_f += g_f_rec
    else:
        for name, value in model.parameters().items():
            if name.startswith("dec"):
                grads[name] = np.zeros_like(value)

    if use_clu:
        weight = gamma if loss == "total" else 1.0
        P = np.asarray(target, dtype=np.float64)
        if P.shape != (n, head.n_clusters):
            raise InvalidInputError(f"target rows must have shape {(n, head.n_clusters)}")
        H, head_cache = head.assign(f)
        parts["clustering"] = float(kl_rows(P, H).mean())
        live = H > 1e-12
        g_H = np.where(live, -P / np.where(live, H, 1.0), 0.0) * (weight / n)
        g_f_clu, g_head = head.backward(head_cache, g_H)
        g_f += g_f_clu
        grads.update({f"head.{k}": v for k, v in g_head.items()})
    elif head is not None:
        grads.update({f"head.{k}": np.zeros_like(v) for k, v in head.parameters().items()})

    _, g_enc = run_backward(model.encoder, enc_caches, g_f, "enc")
    grads.update(g_enc)

    if loss == "reconstruction":
        value = parts["reconstruction"]
    elif loss == "clustering":
        value = parts["clustering"]
    else:
        value = parts["reconstruction"] + gamma * parts["clustering"]
    return value, parts, grads


def gradient(batch, model, loss="reconstruction", head=None, target=None, gamma=0.1):
    """Per-parameter gradients of the selected loss."""
    return loss_and_gradient(batch, model, loss, head, target, gamma)[2]


# -- optimisation -----------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def epoch_batches(n, batch_size, rng):
    """Index batches for one shuffled pass over ``n`` samples."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain(features, epochs=200, seed=0, batch_size=256, lr=1e-3, model=None, history=None):
    """Train on reconstruction loss alone; deterministic given ``seed``.

    ``features`` is an (N, 6) array or a list of FeatureTables (pooled). If
    ``history`` is a list, the full-set loss after each epoch is appended.
    """
    x = pooled_inputs(features)
    if epochs < 0:
        raise InvalidInputError("epochs must be >= 0")
    model = CaeModel(seed) if model is None else model
    rng = np.random.default_rng([seed, 1])
    opt = Adam(lr=lr)
    params = model.parameters()
    for _ in range(epochs):
        for idx in epoch_batches(len(x), batch_size, rng):
            _, _, grads = loss_and_gradient(x[idx], model)
            opt.step(params, grads)
        model.epochs += 1
        if history is not None:
            history.append(reconstruction_loss(x, model))
    return model


def pooled_inputs(features):
    if isinstance(features, np.ndarray):
        x = features.astype(np.float64)
    else:
        tables = list(features) if isinstance(features, (list, tuple)) else [features]
        x = np.concatenate([t.features for t in tables]).astype(np.float64) if tables else np.zeros((0, INPUT_DIM))
    if x.ndim != 2 or x.shape[1] != INPUT_DIM:
        raise InvalidInputError(f"features must be (N, {INPUT_DIM})")
    if len(x) == 0:
        raise InvalidInputError("empty feature set")
    return x
