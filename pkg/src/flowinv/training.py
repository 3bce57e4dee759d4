"""Procedural toy data and a small conditional MLP velocity field trained by flow matching.

The network is plain numpy with hand-written reverse-mode gradients:
``[z_flat, time_embedding(t), cond_embedding[c]] -> 3 x (Linear, SiLU) -> Linear``,
plus a per-pixel skip ``s(t) * z`` with ``s`` linear in the time embedding.
Without the skip the hidden width bottlenecks the noise, and the field cannot
remove it.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .fields import VelocityField
from .tensor_core import make_rng

SHAPE_NAMES = ("circle", "square")
COLOR_NAMES = ("red", "green", "blue")
COLOR_RGB = {"red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.1), "blue": (0.1, 0.1, 0.9)}
N_CLASSES = len(SHAPE_NAMES) * len(COLOR_NAMES)
IMAGE_SHAPE = (3, 24, 24)


def token_of(shape, color):
    return SHAPE_NAMES.index(shape) * len(COLOR_NAMES) + COLOR_NAMES.index(color)


def token_name(token):
    if token is None:
        return "null"
    return f"{COLOR_NAMES[token % 3]}_{SHAPE_NAMES[token // 3]}"


def parse_token(name):
    """``"red_circle"`` -> token; ``"null"`` -> None; integers pass through."""
    if name is None or str(name).lower() in ("null", "none", ""):
        return None
    s = str(name)
    if s.isdigit():
        t = int(s)
        if t >= N_CLASSES:
            raise ValueError(f"unknown condition token {name!r}")
        return t
    try:
        color, shape = s.split("_")
        return token_of(shape, color)
    except ValueError:
        raise ValueError(f"unknown condition token {name!r}") from None


def color_channel(token):
    return token % len(COLOR_NAMES)


@dataclass
class ShapesSample:
    image: np.ndarray
    condition: int
    region_mask: np.ndarray


def _background(rng, h, w):
    base = rng.uniform(0.3, 0.6)
    amp = rng.uniform(0.05, 0.15)
    fy, fx = rng.integers(1, 3, size=2)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    return base + amp * np.sin(2.0 * math.pi * (fx * xx + fy * yy) / w + phase)


def draw_shape(rng, token, h=24, w=24, background=None):
    """Render one sample of class ``token`` on a random striped gray background."""
    shape = SHAPE_NAMES[token // 3]
    color = np.asarray(COLOR_RGB[COLOR_NAMES[token % 3]]) + rng.uniform(-0.05, 0.05, size=3)
    cy, cx = rng.uniform(7.0, h - 8.0), rng.uniform(7.0, w - 8.0)
    r = rng.uniform(4.0, 6.5)
    bg = _background(rng, h, w) if background is None else background
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if shape == "circle":
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        half = 0.85 * r
        region = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    img = np.repeat(bg[None], 3, axis=0)
    img[:, region] = color[:, None]
    return np.clip(img, 0.0, 1.0), region


def gen_shapes_dataset(n, seed):
    """``n`` samples; classes are a shuffled cycle over all six, so every class
    appears once ``n >= 6``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    tokens = rng.permutation(np.resize(np.arange(N_CLASSES), n))
    out = []
    for tok in tokens:
        img, region = draw_shape(rng, int(tok))
        out.append(ShapesSample(img, int(tok), region))
    return out


def gen_two_gaussians(n, seed, spread=0.3):
    """Two labelled blobs in 2-D at (-1, -1) and (1, 1), as ``[n, 2, 1, 1]`` latents."""
    rng = make_rng(seed)
    tokens = rng.integers(0, 2, size=n)
    centers = np.where(tokens[:, None] == 0, -1.0, 1.0)
    pts = centers + spread * rng.standard_normal((n, 2))
    return pts.reshape(n, 2, 1, 1), tokens


def as_arrays(dataset):
    """Accept a list of ShapesSample or an ``(images, tokens)`` pair."""
    if isinstance(dataset, tuple):
        images, tokens = dataset
        return np.asarray(images, dtype=np.float64), np.asarray(tokens)
    images = np.stack([s.image for s in dataset]).astype(np.float64)
    tokens = np.array([s.condition for s in dataset])
    return images, tokens


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s + x * s * (1.0 - s)


def time_frequencies(time_dim):
    half = time_dim // 2
    return np.exp(np.linspace(0.0, math.log(32.0), half))


def time_embedding(t, time_dim):
    f = time_frequencies(time_dim)
    arg = np.asarray(t, dtype=np.float64)[:, None] * f[None]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class NeuralField(VelocityField):
    """MLP velocity field over flattened latents of a fixed shape.

    Parameters live in ``self.params`` in declaration order (the checkpoint
    order): condition embedding, then weight/bias per linear layer. Row
    ``n_classes`` of the embedding is the NULL condition.
    """

    def __init__(self, shape, n_classes, hidden=(256, 256, 256), time_dim=16, cond_dim=16, params=None, seed=0):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)
        self.n_classes = int(n_classes)
        self.vocab_size = self.n_classes
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        self.dim = int(np.prod(self.shape))
        self.params = params if params is not None else self._init_params(make_rng(seed))
        self._check_params()

    @property
    def null_token(self):
        return self.n_classes

    def param_shapes(self):
        widths = [self.dim + self.time_dim + self.cond_dim, *self.hidden, self.dim]
        shapes = [("cond_emb", (self.n_classes + 1, self.cond_dim))]
        for k in range(len(widths) - 1):
            shapes.append((f"W{k}", (widths[k], widths[k + 1])))
            shapes.append((f"b{k}", (widths[k + 1],)))
        shapes.append(("Ws", (self.time_dim, self.dim)))
        shapes.append(("bs", (self.dim,)))
        return shapes

    def _init_params(self, rng):
        params = {}
        shapes = self.param_shapes()
        last = f"W{len(self.hidden)}"
        for name, shp in shapes:
            if name == "cond_emb":
                params[name] = rng.standard_normal(shp)
            elif name == "Ws":
                params[name] = np.zeros(shp)
            elif name.startswith("W"):
                scale = 1.0 / math.sqrt(shp[0])
                if name == last:
                    scale *= 0.1
                params[name] = scale * rng.standard_normal(shp)
            else:
                params[name] = np.zeros(shp)
        return params

    def _check_params(self):
        for name, shp in self.param_shapes():
            if name not in self.params or self.params[name].shape != shp:
                raise ValueError(f"parameter {name} missing or not of shape {shp}")

    def config(self):
        return {
            "shape": list(self.shape),
            "n_classes": self.n_classes,
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
            "cond_dim": self.cond_dim,
        }

    def copy(self):
        return NeuralField(self.shape, self.n_classes, self.hidden, self.time_dim, self.cond_dim,
                           {k: v.copy() for k, v in self.params.items()})

    def tokens(self, c, n):
        """Condition(s) to an int array, NULL mapped to ``null_token``."""
        if c is None or isinstance(c, (int, np.integer)):
            tok = self.null_token if c is None else int(c)
            return np.full(n, tok, dtype=np.int64)
        return np.array([self.null_token if x is None else int(x) for x in c], dtype=np.int64)

    def forward_batch(self, x, t, tok):
        """``x``: [B, dim], ``t``: [B], ``tok``: [B] ints. Returns (output, cache)."""
        p = self.params
        dt = p["W0"].dtype
        h = np.concatenate([x.astype(dt, copy=False), time_embedding(t, self.time_dim).astype(dt, copy=False),
                            p["cond_emb"][tok]], axis=1)
        cache = [h]
        n_lin = len(self.hidden) + 1
        for k in range(n_lin):
            pre = h @ p[f"W{k}"] + p[f"b{k}"]
            if k < n_lin - 1:
                cache.append(pre)
                h = silu(pre)
                cache.append(h)
            else:
                h = pre
        emb = cache[0][:, self.dim:self.dim + self.time_dim]
        h = h + (emb @ p["Ws"] + p["bs"]) * cache[0][:, :self.dim]
        return h, (cache, tok)

    def backward(self, cache, dout):
        """Gradients of ``sum(dout * output)`` for every parameter."""
        acts, tok = cache
        p = self.params
        grads = {}
        n_lin = len(self.hidden) + 1
        gs = dout * acts[0][:, :self.dim]
        grads["Ws"] = acts[0][:, self.dim:self.dim + self.time_dim].T @ gs
        grads["bs"] = gs.sum(axis=0)
        g = dout
        for k in range(n_lin - 1, -1, -1):
            inp = acts[2 * k]
            grads[f"W{k}"] = inp.T @ g
            grads[f"b{k}"] = g.sum(axis=0)
            g = g @ p[f"W{k}"].T
            if k > 0:
                g = g * silu_grad(acts[2 * k - 1])
        emb = np.zeros_like(p["cond_emb"])
        np.add.at(emb, tok, g[:, self.dim + self.time_dim:])
        grads["cond_emb"] = emb
        return grads

    def _velocity(self, z, t, c):
        z = np.asarray(z, dtype=np.float64)
        out, _ = self.forward_batch(z.reshape(1, -1), np.array([t]), self.tokens(c, 1))
        return out.reshape(z.shape).astype(np.float64, copy=False)

    def eval_batch(self, z, t, c):
        """Evaluate B latents at once (counts B evaluations)."""
        z = np.asarray(z, dtype=np.float64)
        b = z.shape[0]
        tok = self.tokens(c, b)
        for x in tok:
            self.check_condition(None if x == self.null_token else int(x))
        with self._lock:
            self._nfe += b
        out, _ = self.forward_batch(z.reshape(b, -1), np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)), tok)
        return out.reshape(z.shape)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    cond_dropout: float = 0.1
    lr_schedule: str = "cosine"
    ema: float = 0.0
    precision: str = "float64"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.eps <= 0:
            raise ValueError("lr, batch_size and eps must be positive and steps non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= self.cond_dropout < 1:
            raise ValueError("cond_dropout must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.ema < 1:
            raise ValueError("ema must lie in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")

    def lr_at(self, step):
        if self.lr_schedule == "constant" or self.steps == 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / self.steps))

    def as_dict(self):
        return asdict(self)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fm_loss(field, z0, c, rng):
    """Flow-matching loss on one batch and, for a NeuralField, its gradients.

    Draws ``z1 ~ N(0, I)`` and ``t ~ U[0, 1]`` per item; the loss is the batch
    mean of ``||(z1 - z0) - v(t z1 + (1 - t) z0, t | c)||^2``.
    Returns ``(loss, grads)``; ``grads`` is None for fields without parameters.
    """
    z0 = np.asarray(z0)
    if z0.dtype != np.float32:
        z0 = z0.astype(np.float64)
    b = z0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    z1 = rng.standard_normal(z0.shape).astype(z0.dtype)
    t = rng.random(b)
    tb = t.reshape((b,) + (1,) * (z0.ndim - 1)).astype(z0.dtype)
    zt = tb * z1 + (1.0 - tb) * z0
    target = (z1 - z0).reshape(b, -1)
    if isinstance(field, NeuralField):
        out, cache = field.forward_batch(zt.reshape(b, -1), t, field.tokens(c, b))
        diff = out - target
        loss = float(np.sum(diff * diff) / b)
        return loss, field.backward(cache, (2.0 / b) * diff)
    cs = c if isinstance(c, (list, tuple, np.ndarray)) else [c] * b
    out = np.stack([field.eval(zt[k], t[k], None if cs[k] is None else int(cs[k])) for k in range(b)]).reshape(b, -1)
    diff = out - target
    return float(np.sum(diff * diff) / b), None


def train(dataset, config, field=None, log_every=0, log=None):
    """Adam on the flow-matching loss. Returns the field with ``loss_history`` attached.

    ``dataset`` is a list of ShapesSample or an ``(images, tokens)`` pair;
    ``field`` defaults to a fresh NeuralField seeded from ``config.seed``.
    With ``precision="float32"`` the optimisation runs in single precision
    and the returned weights are widened back to float64. With ``ema > 0``
    the returned weights are the exponential moving average.
    """
    images, tokens = as_arrays(dataset)
    if field is None:
        n_classes = N_CLASSES if images.shape[1:] == IMAGE_SHAPE else int(tokens.max()) + 1
        field = NeuralField(images.shape[1:], n_classes, seed=config.seed)
    if config.steps == 0:
        field.loss_history = []
        return field
    dtype = np.float32 if config.precision == "float32" else np.float64
    work = field.copy()
    work.params = {k: v.astype(dtype) for k, v in work.params.items()}
    data = images.astype(dtype)
    ema = {k: v.copy() for k, v in field.params.items()} if config.ema > 0 else None
    rng = make_rng(config.seed + 1)
    opt = Adam(work.params, config.lr, config.beta1, config.beta2, config.eps)
    history = []
    n = images.shape[0]
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        tok = tokens[idx].astype(np.int64)
        if config.cond_dropout > 0:
            drop = rng.random(config.batch_size) < config.cond_dropout
            tok = np.where(drop, work.null_token, tok)
        loss, grads = fm_loss(work, data[idx], [None if x == work.null_token else int(x) for x in tok], rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        opt.step(work.params, grads, config.lr_at(step))
        if ema is not None:
            for k, v in work.params.items():
                ema[k] = config.ema * ema[k] + (1.0 - config.ema) * v
        history.append(loss)
        if log is not None and log_every and (step + 1) % log_every == 0:
            log(f"step {step + 1}/{config.steps} loss {np.mean(history[-log_every:]):.4f}")
    final = ema if ema is not None else work.params
    field.params = {k: np.asarray(v, dtype=np.float64) for k, v in final.items()}
    field.loss_history = history
    return field
