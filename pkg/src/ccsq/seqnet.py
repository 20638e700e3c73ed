"""Recurrent sequence regressor trained on a concordance loss.

Layers are unidirectional (``lstm``) or bidirectional (``blstm``) LSTMs;
heads are per-timestep dense layers with identity, tanh or softmax output.
A softmax head over speaker identities enables the speaker-adversarial
objective, which subtracts ``adversarial_lambda`` times the speaker
cross-entropy from the regression loss.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateStatisticsError, DivergenceError, ValidationError
from .metrics import PROB_FLOOR, categorical_cross_entropy, ccc, ccc_loss_grad, pearson_cc

__all__ = [
    "LayerSpec",
    "HeadSpec",
    "NetworkSpec",
    "NetworkParams",
    "TrainConfig",
    "Utterance",
    "init_params",
    "forward",
    "loss",
    "batch_loss",
    "backward",
    "train_fold",
    "predict_utterance",
    "speaker_accuracy",
    "save_params",
    "load_params",
    "audio_spec",
    "video_spec",
]

LAYER_KINDS = ("lstm", "blstm")
HEAD_KINDS = ("identity", "tanh", "softmax")
TASKS = ("arousal", "valence", "speaker")
MAGIC = b"CCSQ"
FORMAT_VERSION = 1
CLIP_NORM = 5.0
MOMENTUM = 0.9
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if int(self.size) < 1:
            raise ValidationError(f"layer size must be positive, got {self.size}")

    @property
    def directions(self):
        return 2 if self.kind == "blstm" else 1

    @property
    def out_dim(self):
        return self.size * self.directions


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    width: int
    task: str

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValidationError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.task not in TASKS:
            raise ValidationError(f"head task must be one of {TASKS}, got {self.task!r}")
        if int(self.width) < 1:
            raise ValidationError(f"head width must be positive, got {self.width}")
        if (self.kind == "softmax") != (self.task == "speaker"):
            raise ValidationError("softmax heads are used for, and only for, the speaker task")
        if self.kind != "softmax" and self.width != 1:
            raise ValidationError("regression heads have width 1")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple
    heads: tuple

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        heads = tuple(h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads)
        if int(self.input_dim) < 1:
            raise ValidationError("input_dim must be positive")
        if not layers:
            raise ValidationError("network needs at least one layer")
        if not heads:
            raise ValidationError("network needs at least one head")
        tasks = [h.task for h in heads]
        if len(set(tasks)) != len(tasks):
            raise ValidationError(f"duplicate head tasks: {tasks}")
        if not any(h.kind != "softmax" for h in heads):
            raise ValidationError("network needs a regression head")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "heads", heads)

    @property
    def adversarial(self):
        return any(h.kind == "softmax" for h in self.heads)

    @property
    def regression_tasks(self):
        return tuple(h.task for h in self.heads if h.kind != "softmax")

    @property
    def hidden_dim(self):
        return self.layers[-1].out_dim

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "layers": [asdict(l) for l in self.layers],
            "heads": [asdict(h) for h in self.heads],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(int(d["input_dim"]), tuple(d["layers"]), tuple(d["heads"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed network spec: {exc}") from None

    def layout(self):
        """Parameter blocks as ``(key, shape)`` in serialization order."""
        blocks = []
        in_dim = self.input_dim
        for li, layer in enumerate(self.layers):
            H = layer.size
            for d in range(layer.directions):
                blocks.append(((li, d, "wx"), (4 * H, in_dim)))
                blocks.append(((li, d, "wh"), (4 * H, H)))
                blocks.append(((li, d, "b"), (4 * H,)))
            in_dim = layer.out_dim
        for hi, head in enumerate(self.heads):
            blocks.append((("head", hi, "w"), (head.width, in_dim)))
            blocks.append((("head", hi, "b"), (head.width,)))
        return blocks


def audio_spec(input_dim, tasks=("arousal",), speakers=0):
    """BLSTM(100) -> LSTM(40) with identity output heads."""
    heads = [HeadSpec("identity", 1, t) for t in tasks]
    if speakers:
        heads.append(HeadSpec("softmax", speakers, "speaker"))
    return NetworkSpec(input_dim, (LayerSpec("blstm", 100), LayerSpec("lstm", 40)), tuple(heads))


def video_spec(input_dim, tasks=("valence",), speakers=0):
    """BLSTM(16) -> BLSTM(8) with tanh output heads."""
    heads = [HeadSpec("tanh", 1, t) for t in tasks]
    if speakers:
        heads.append(HeadSpec("softmax", speakers, "speaker"))
    return NetworkSpec(input_dim, (LayerSpec("blstm", 16), LayerSpec("blstm", 8)), tuple(heads))


class NetworkParams:
    """All weights of a network, stored in one flat vector.

    ``flat`` is laid out in serialization order (see ``NetworkSpec.layout``);
    ``self[key]`` returns a shaped view into it.
    """

    def __init__(self, spec: NetworkSpec, flat=None):
        self.spec = spec
        self._slices = {}
        off = 0
        for key, shape in spec.layout():
            n = int(np.prod(shape))
            self._slices[key] = (off, off + n, shape)
            off += n
        self.size = off
        if flat is None:
            flat = np.zeros(off)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (off,):
            raise ValidationError(f"expected {off} parameters, got {flat.size}")
        self.flat = flat

    def __getitem__(self, key):
        a, b, shape = self._slices[key]
        return self.flat[a:b].reshape(shape)

    def keys(self):
        return self._slices.keys()

    def copy(self):
        return NetworkParams(self.spec, self.flat.copy())

    def zeros_like(self):
        return NetworkParams(self.spec, np.zeros_like(self.flat))

    def __eq__(self, other):
        return (
            isinstance(other, NetworkParams)
            and self.spec == other.spec
            and np.array_equal(self.flat, other.flat)
        )

    def swap_directions(self, layer=0):
        """Copy with forward and reverse direction weights of ``layer`` exchanged."""
        out = self.copy()
        for part in ("wx", "wh", "b"):
            out[(layer, 0, part)][...] = self[(layer, 1, part)]
            out[(layer, 1, part)][...] = self[(layer, 0, part)]
        return out


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 100
    patience: int = 15
    batch: int = 8
    seed: int = 0
    adversarial_lambda: float = 0.0
    task_weights: dict = field(default_factory=dict)
    momentum: float = MOMENTUM
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if int(self.max_epochs) < 1:
            raise ValidationError("max_epochs must be >= 1")
        if int(self.patience) < 1:
            raise ValidationError("patience must be >= 1")
        if int(self.batch) < 1:
            raise ValidationError("batch must be >= 1")
        if self.adversarial_lambda < 0:
            raise ValidationError("adversarial_lambda must be >= 0")
        object.__setattr__(self, "task_weights", dict(self.task_weights))

    def weight(self, task):
        return float(self.task_weights.get(task, 1.0))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Utterance:
    """One training or evaluation sequence.

    ``targets`` maps task name to the utterance-level label; ``speaker`` is
    a class index for the speaker head (or -1 when unused).
    """

    uid: str
    x: np.ndarray
    targets: dict = field(default_factory=dict)
    speaker: int = -1

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError(f"{self.uid}: sequence must be W x F with W >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"{self.uid}: sequence contains NaN or Inf")
        object.__setattr__(self, "x", x)


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases except forget-gate biases of 1."""
    rng = np.random.default_rng(seed)
    params = NetworkParams(spec)
    for key, shape in spec.layout():
        view = params[key]
        if key[-1] in ("wx", "wh", "w"):
            r = math.sqrt(6.0 / (shape[0] + shape[1]))
            view[...] = rng.uniform(-r, r, size=shape)
        elif key[0] != "head":
            H = shape[0] // 4
            view[H : 2 * H] = 1.0
    return params


def glorot_bound(shape):
    return math.sqrt(6.0 / (shape[0] + shape[1]))


# ----------------------------------------------------------------------------
# forward / backward


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _run_layers(spec, params, x, lstm_fwd):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValidationError(
            f"input must be W x {spec.input_dim}, got {x.shape}"
        )
    if x.shape[0] < 1:
        raise ValidationError("empty input sequence")
    caches = []
    inp = x
    for li, layer in enumerate(spec.layers):
        outs = []
        dir_caches = []
        for d in range(layer.directions):
            src = inp if d == 0 else inp[::-1]
            src = np.ascontiguousarray(src)
            wx = params[(li, d, "wx")]
            wh = np.ascontiguousarray(params[(li, d, "wh")])
            zin = np.ascontiguousarray(src @ wx.T + params[(li, d, "b")])
            acts, c, h = lstm_fwd(zin, wh)
            dir_caches.append((src, acts, c, h))
            outs.append(h if d == 0 else h[::-1])
        caches.append(dir_caches)
        inp = np.hstack(outs) if len(outs) > 1 else outs[0]
    return inp, caches


def _head_logits(spec, params, hidden):
    return [hidden @ params[("head", hi, "w")].T + params[("head", hi, "b")]
            for hi in range(len(spec.heads))]


def _activate(head, z):
    if head.kind == "identity":
        return z[:, 0]
    if head.kind == "tanh":
        return np.tanh(z[:, 0])
    return _softmax(z)


def forward(spec: NetworkSpec, params: NetworkParams, seq, backend=None):
    """Per-head output sequences for one utterance.

    Returns ``{task: array}``; regression tasks give shape (W,), the speaker
    task gives (W, K) rows of class probabilities.
    """
    lstm_fwd, _ = kernels.get_backend(backend)
    hidden, _ = _run_layers(spec, params, seq, lstm_fwd)
    logits = _head_logits(spec, params, hidden)
    return {h.task: _activate(h, z) for h, z in zip(spec.heads, logits)}


def hidden_states(spec, params, seq, backend=None):
    """Output of the last recurrent layer, shape (W, hidden_dim)."""
    lstm_fwd, _ = kernels.get_backend(backend)
    return _run_layers(spec, params, seq, lstm_fwd)[0]


def _speaker_log_probs(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _batch_loss(spec, config, outs, utts, need_grad):
    """Loss of a batch and, optionally, d loss / d head pre-activations.

    ``outs`` holds per-utterance lists of raw head pre-activations.
    """
    total = 0.0
    grads = [[None] * len(spec.heads) for _ in utts]
    lengths = [u.x.shape[0] for u in utts]
    splits = np.cumsum(lengths)[:-1]
    for hi, head in enumerate(spec.heads):
        if head.kind == "softmax":
            lam = config.adversarial_lambda
            n_steps = sum(lengths)
            ce_sum = 0.0
            for ui, (u, o) in enumerate(zip(utts, outs)):
                z = o[hi]
                if lam == 0.0:
                    if need_grad:
                        grads[ui][hi] = np.zeros_like(z)
                    continue
                if not 0 <= u.speaker < z.shape[1]:
                    raise ValidationError(f"{u.uid}: speaker index {u.speaker} outside head")
                logp = _speaker_log_probs(z)
                lp = logp[:, u.speaker]
                floored = lp < LOG_FLOOR
                ce_sum += float(np.sum(-np.where(floored, LOG_FLOOR, lp)))
                if need_grad:
                    # d(-lam * mean CE)/dz = -lam/n * (p - onehot), zero where floored
                    g = np.exp(logp)
                    g[:, u.speaker] -= 1.0
                    g[floored] = 0.0
                    grads[ui][hi] = (-lam / n_steps) * g
            total -= lam * ce_sum / n_steps
            continue
        w = config.weight(head.task)
        pre = np.concatenate([o[hi][:, 0] for o in outs])
        pred = np.tanh(pre) if head.kind == "tanh" else pre
        ref = np.concatenate([np.full(n, u.targets[head.task]) for n, u in zip(lengths, utts)])
        if w == 0.0:
            if need_grad:
                for ui, o in enumerate(outs):
                    grads[ui][hi] = np.zeros_like(o[hi])
            continue
        _check_spread(ref, head.task)
        lval, g = ccc_loss_grad(pred, ref)
        total += w * lval
        if need_grad:
            g = w * g
            if head.kind == "tanh":
                g = g * (1.0 - pred * pred)
            for ui, gpart in enumerate(np.split(g, splits)):
                grads[ui][hi] = gpart[:, None]
    return total, grads


def _check_spread(ref, task):
    if ref.size and np.all(ref == ref[0]):
        raise DegenerateStatisticsError(f"all {task} targets in the batch are equal; CCC undefined")


def _check_targets(spec, utts):
    for u in utts:
        for t in spec.regression_tasks:
            if t not in u.targets:
                raise ValidationError(f"{u.uid}: missing target for {t}")


def loss(spec, outputs, utts, config: TrainConfig) -> float:
    """Batch loss from ``forward`` outputs (one dict per utterance)::

        sum_task w_task * (1 - CCC_task) - lambda * mean_t CE_speaker

    CCC is taken over all timesteps of all utterances, with each
    utterance's label repeated at every timestep.  The cross-entropy
    averages over every timestep of the batch.
    """
    _check_targets(spec, utts)
    if len(outputs) != len(utts):
        raise ValidationError("one output dict per utterance required")
    total = 0.0
    for head in spec.heads:
        if head.kind == "softmax":
            lam = config.adversarial_lambda
            if lam == 0.0:
                continue
            ce = [categorical_cross_entropy(row, u.speaker)
                  for o, u in zip(outputs, utts) for row in o["speaker"]]
            total -= lam * float(np.mean(ce))
            continue
        pred = np.concatenate([np.asarray(o[head.task], dtype=np.float64) for o in outputs])
        ref = np.concatenate([np.full(len(o[head.task]), u.targets[head.task])
                              for o, u in zip(outputs, utts)])
        _check_spread(ref, head.task)
        total += config.weight(head.task) * (1.0 - ccc(pred, ref))
    return total


def batch_loss(spec, params, utts, config: TrainConfig, backend=None) -> float:
    """``loss`` of the network's own outputs on ``utts``."""
    return loss(spec, [forward(spec, params, u.x, backend) for u in utts], utts, config)


def backward(spec, params, utts, config: TrainConfig, backend=None):
    """Exact gradient of ``loss`` by backpropagation through time.

    Returns ``(loss_value, grad)`` with ``grad`` a ``NetworkParams``.
    Utterances are processed in list order.
    """
    lstm_fwd, lstm_bwd = kernels.get_backend(backend)
    _check_targets(spec, utts)
    hidden_all, caches_all, outs = [], [], []
    for u in utts:
        hidden, caches = _run_layers(spec, params, u.x, lstm_fwd)
        hidden_all.append(hidden)
        caches_all.append(caches)
        outs.append(_head_logits(spec, params, hidden))
    value, dlogits = _batch_loss(spec, config, outs, utts, need_grad=True)

    grad = params.zeros_like()
    for u, hidden, caches, dl in zip(utts, hidden_all, caches_all, dlogits):
        dh = np.zeros_like(hidden)
        for hi in range(len(spec.heads)):
            g = dl[hi]
            grad[("head", hi, "w")][...] += g.T @ hidden
            grad[("head", hi, "b")][...] += g.sum(axis=0)
            dh += g @ params[("head", hi, "w")]
        for li in range(len(spec.layers) - 1, -1, -1):
            layer = spec.layers[li]
            H = layer.size
            d_in = None
            for d in range(layer.directions):
                src, acts, c, h = caches[li][d]
                dh_dir = dh[:, d * H : (d + 1) * H]
                if d == 1:
                    dh_dir = dh_dir[::-1]
                wh = np.ascontiguousarray(params[(li, d, "wh")])
                dz, dwh = lstm_bwd(acts, c, h, wh, np.ascontiguousarray(dh_dir))
                grad[(li, d, "wh")][...] += dwh
                grad[(li, d, "wx")][...] += dz.T @ src
                grad[(li, d, "b")][...] += dz.sum(axis=0)
                dsrc = dz @ params[(li, d, "wx")]
                if d == 1:
                    dsrc = dsrc[::-1]
                d_in = dsrc if d_in is None else d_in + dsrc
            dh = d_in
    return value, grad


def predict_utterance(spec, params, seq, backend=None) -> dict:
    """Utterance-level prediction per regression task: mean over timesteps."""
    outs = forward(spec, params, seq, backend)
    return {t: float(np.mean(outs[t])) for t in spec.regression_tasks}


def speaker_accuracy(spec, params, utts, backend=None) -> float:
    """Fraction of utterances whose mean speaker posterior peaks at the true speaker."""
    if not spec.adversarial:
        raise ValidationError("network has no speaker head")
    hits = 0
    for u in utts:
        probs = forward(spec, params, u.x, backend)["speaker"]
        hits += int(np.argmax(probs.mean(axis=0)) == u.speaker)
    return hits / len(utts)


# ----------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_cc: float
    val_ccc: float


def _safe_metric(fn, pred, ref):
    try:
        return fn(pred, ref)
    except DegenerateStatisticsError:
        return 0.0


def evaluate_utterances(spec, params, utts, task, backend=None):
    pred = np.array([predict_utterance(spec, params, u.x, backend)[task] for u in utts])
    ref = np.array([u.targets[task] for u in utts])
    return pred, ref


def train_fold(train_utts, val_utts, spec: NetworkSpec, config: TrainConfig,
               primary_task=None, init=None, backend=None, log=None):
    """Momentum SGD with early stopping on validation CCC.

    After every epoch the utterance-level predictions for ``val_utts`` are
    scored with CCC on ``primary_task`` (default: first regression head).
    Training stops once that score has not improved for ``config.patience``
    consecutive epochs.  Returns ``(best_params, history)``.
    """
    if not train_utts or not val_utts:
        raise ValidationError("train and validation sets must be non-empty")
    if config.adversarial_lambda > 0 and not spec.adversarial:
        raise ValidationError("adversarial_lambda > 0 requires a softmax speaker head")
    task = primary_task or spec.regression_tasks[0]
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(spec, config.seed)
    velocity = np.zeros_like(params.flat)
    history = []
    best_ccc = -math.inf
    best = params.copy()
    stale = 0
    n = len(train_utts)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch):
            batch = [train_utts[j] for j in order[start : start + config.batch]]
            try:
                value, grad = backward(spec, params, batch, config, backend)
            except DegenerateStatisticsError:
                # constant targets carry no concordance signal; skip the step
                continue
            if not math.isfinite(value) or not np.all(np.isfinite(grad.flat)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            g = grad.flat
            norm = math.sqrt(float(np.dot(g, g)))
            if norm > config.clip_norm:
                g = g * (config.clip_norm / norm)
            velocity *= config.momentum
            velocity -= config.learning_rate * g
            params.flat += velocity
            losses.append(value)
        if not losses:
            raise DegenerateStatisticsError("every training batch has constant targets")
        pred, ref = evaluate_utterances(spec, params, val_utts, task, backend)
        if not np.all(np.isfinite(pred)):
            raise DivergenceError(f"non-finite predictions at epoch {epoch}", epoch=epoch)
        rec = EpochRecord(
            epoch,
            float(np.mean(losses)),
            _safe_metric(pearson_cc, pred, ref),
            _safe_metric(ccc, pred, ref),
        )
        history.append(rec)
        if log is not None:
            log(rec)
        if rec.val_ccc > best_ccc:
            best_ccc = rec.val_ccc
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_cc,val_ccc"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_cc!r},{r.val_ccc!r}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# serialization


def dumps_params(params: NetworkParams) -> bytes:
    """Binary layout: b"CCSQ", u16 version, u32 spec length, spec JSON, f64 LE values."""
    spec_json = json.dumps(params.spec.to_dict(), sort_keys=True).encode("utf-8")
    return (
        MAGIC
        + struct.pack("<HI", FORMAT_VERSION, len(spec_json))
        + spec_json
        + params.flat.astype("<f8").tobytes()
    )


def loads_params(data: bytes) -> NetworkParams:
    if data[:4] != MAGIC:
        raise ValidationError("not a CCSQ parameter file (bad magic)")
    if len(data) < 10:
        raise ValidationError("truncated parameter file")
    version, n = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported parameter file version {version}")
    try:
        spec = NetworkSpec.from_dict(json.loads(data[10 : 10 + n].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt spec in parameter file: {exc}") from None
    body = data[10 + n :]
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = NetworkParams(spec, flat)
    if not np.all(np.isfinite(params.flat)):
        raise ValidationError("parameter file contains non-finite values")
    return params


def save_params(params: NetworkParams, path):
    Path(path).write_bytes(dumps_params(params))


def load_params(path) -> NetworkParams:
    return loads_params(Path(path).read_bytes())
