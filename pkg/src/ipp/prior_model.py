"""Convolutional prior network mapping a frame stack to Dirichlet concentrations.

Architecture (no padding, floored output sizes)::

    4x80x80 -conv 8x8/4-> 32x19x19 -conv 4x4/2-> 64x8x8 -conv 2x2/1-> 64x7x7
            -flatten-> 3136 -fc-> 512 -fc-> n_actions -softplus + floor-> alpha

ReLU follows every hidden layer. Training minimises the batch mean of the
squared Euclidean distance between predicted and target concentrations with
plain minibatch SGD.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .physics_env import N_ACTIONS, STACK_DEPTH, STACK_SIZE, TrajectoryLog

INPUT_SHAPE = (STACK_DEPTH, STACK_SIZE, STACK_SIZE)
CONV_SPECS = (  # name, in_channels, out_channels, kernel, stride
    ("conv1", STACK_DEPTH, 32, 8, 4),
    ("conv2", 32, 64, 4, 2),
    ("conv3", 64, 64, 2, 1),
)
HIDDEN = 512
DEFAULT_ALPHA_FLOOR = 1e-2


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


def layer_shapes(n_actions: int = N_ACTIONS) -> list[tuple[int, ...]]:
    """Activation shapes from input to output, e.g. ``[(4, 80, 80), ..., (2,)]``."""
    shapes: list[tuple[int, ...]] = [INPUT_SHAPE]
    size = INPUT_SHAPE[1]
    for _, _, cout, k, s in CONV_SPECS:
        size = conv_output_size(size, k, s)
        shapes.append((cout, size, size))
    flat = int(np.prod(shapes[-1]))
    shapes += [(flat,), (HIDDEN,), (n_actions,)]
    return shapes


FLAT = layer_shapes()[-3][0]
assert [s[1] for s in layer_shapes()[1:4]] == [19, 8, 7] and FLAT == 3136


class WeightFileError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def _param_shapes(n_actions: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, cin, cout, k, _ in CONV_SPECS:
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    shapes["fc1.weight"] = (HIDDEN, FLAT)
    shapes["fc1.bias"] = (HIDDEN,)
    shapes["out.weight"] = (n_actions, HIDDEN)
    shapes["out.bias"] = (n_actions,)
    return shapes


@dataclass
class CnnParams:
    """Named parameter tensors of the prior network (ordered as listed above)."""

    tensors: dict[str, np.ndarray]
    alpha_floor: float = DEFAULT_ALPHA_FLOOR

    def __post_init__(self) -> None:
        expected = _param_shapes(self.n_actions)
        if list(self.tensors) != list(expected):
            raise ValueError(f"parameter names {list(self.tensors)} != {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    @property
    def n_actions(self) -> int:
        return self.tensors["out.bias"].shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["out.bias"].dtype

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        n_actions: int = N_ACTIONS,
        dtype=np.float32,
        alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    ) -> "CnnParams":
        """He-uniform weights (+-sqrt(6/fan_in)); biases uniform in +-1/sqrt(fan_in).

        The narrower +-1/sqrt(fan_in) weight range shrinks activations by
        roughly 0.4x per ReLU layer and training stalls at the mean target.
        """
        tensors = {}
        shapes = _param_shapes(n_actions)
        for name, shape in shapes.items():
            wshape = shapes[name.replace(".bias", ".weight")]
            fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(6.0 / fan_in) if name.endswith(".weight") else 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(tensors, alpha_floor)

    @classmethod
    def zeros(cls, n_actions: int = N_ACTIONS, dtype=np.float32, alpha_floor=DEFAULT_ALPHA_FLOOR):
        return cls({k: np.zeros(s, dtype) for k, s in _param_shapes(n_actions).items()}, alpha_floor)

    def astype(self, dtype) -> "CnnParams":
        return CnnParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.alpha_floor)

    def copy(self) -> "CnnParams":
        return self.astype(self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def equals(self, other: "CnnParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            v.dtype == other.tensors[k].dtype and np.array_equal(v, other.tensors[k])
            for k, v in self.tensors.items()
        )


# -- layers ------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, s: int) -> tuple[np.ndarray, int]:
    b, c, n, _ = x.shape
    o = conv_output_size(n, k, s)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : (o - 1) * s + 1 : s, : (o - 1) * s + 1 : s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * o * o, c * k * k)
    return cols, o


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int, s: int, o: int) -> np.ndarray:
    b, c, n, _ = x_shape
    d = dcols.reshape(b, o, o, c, k, k)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    span = (o - 1) * s + 1
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + span : s, j : j + span : s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == INPUT_SHAPE:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
        raise ValueError(f"expected input of shape {INPUT_SHAPE} or (B, *{INPUT_SHAPE}), got {x.shape}")
    return x


def _forward(kappa: CnnParams, x: np.ndarray, keep: bool):
    cache = []
    h = x.astype(kappa.dtype, copy=False)
    for name, _, cout, k, s in CONV_SPECS:
        cols, o = _im2col(h, k, s)
        w = kappa[f"{name}.weight"].reshape(cout, -1)
        z = cols @ w.T + kappa[f"{name}.bias"]
        a = np.maximum(z, 0)
        if keep:
            cache.append((cols, h.shape, o, z > 0))
        h = a.reshape(x.shape[0], o, o, cout).transpose(0, 3, 1, 2)
    flat = h.reshape(x.shape[0], -1)
    z1 = flat @ kappa["fc1.weight"].T + kappa["fc1.bias"]
    a1 = np.maximum(z1, 0)
    z2 = a1 @ kappa["out.weight"].T + kappa["out.bias"]
    alpha = _softplus(z2) + kappa.alpha_floor
    if keep:
        cache.append((flat, z1 > 0, a1, z2))
    return alpha, cache


def forward(kappa: CnnParams, x: np.ndarray) -> np.ndarray:
    """Dirichlet concentrations for one stack ``(4,80,80)`` or a batch ``(B,4,80,80)``."""
    single = np.asarray(x).shape == INPUT_SHAPE
    alpha, _ = _forward(kappa, _check_input(x), keep=False)
    return alpha[0] if single else alpha


def loss(kappa: CnnParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Batch mean of ``||alpha_pred - alpha_target||^2``."""
    inputs = _check_input(inputs)
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    pred, _ = _forward(kappa, inputs, keep=False)
    diff = pred - np.asarray(targets, dtype=pred.dtype).reshape(pred.shape)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def loss_and_grad(kappa: CnnParams, inputs: np.ndarray, targets: np.ndarray):
    inputs = _check_input(inputs)
    b = inputs.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    pred, cache = _forward(kappa, inputs, keep=True)
    diff = pred - np.asarray(targets, dtype=pred.dtype).reshape(pred.shape)
    value = float(np.mean(np.sum(diff * diff, axis=1)))

    grads: dict[str, np.ndarray] = {}
    flat, mask1, a1, z2 = cache.pop()
    dz2 = (2.0 / b) * diff * _sigmoid(z2)
    grads["out.weight"] = dz2.T @ a1
    grads["out.bias"] = dz2.sum(axis=0)
    dz1 = (dz2 @ kappa["out.weight"]) * mask1
    grads["fc1.weight"] = dz1.T @ flat
    grads["fc1.bias"] = dz1.sum(axis=0)
    dh = (dz1 @ kappa["fc1.weight"]).reshape(b, *layer_shapes(kappa.n_actions)[3])

    conv_grads = {}
    for (name, _, cout, k, s), (cols, in_shape, o, mask) in zip(reversed(CONV_SPECS), reversed(cache)):
        dz = dh.transpose(0, 2, 3, 1).reshape(-1, cout) * mask
        conv_grads[f"{name}.weight"] = (dz.T @ cols).reshape(kappa[f"{name}.weight"].shape)
        conv_grads[f"{name}.bias"] = dz.sum(axis=0)
        if name != CONV_SPECS[0][0]:
            dcols = dz @ kappa[f"{name}.weight"].reshape(cout, -1)
            dh = _col2im(dcols, in_shape, k, s, o)

    ordered = {}
    for name in kappa.tensors:
        g = grads[name] if name in grads else conv_grads[name]
        ordered[name] = g.astype(kappa.dtype, copy=False)
    return value, ordered


def backward(kappa: CnnParams, inputs: np.ndarray, targets: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` with respect to every parameter tensor."""
    return loss_and_grad(kappa, inputs, targets)[1]


# -- data ----------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Examples reference shared frames instead of holding 4 copies each.

    ``stacks[i]`` lists the four frame indices (oldest first) of example ``i``.
    """

    frames: np.ndarray
    stacks: np.ndarray
    targets: np.ndarray
    delta: int = 0

    def __len__(self) -> int:
        return len(self.targets)

    def inputs(self, idx) -> np.ndarray:
        return self.frames[self.stacks[idx]]

    def batches(self, size: int, order: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), size):
            idx = order[start : start + size]
            yield self.inputs(idx), self.targets[idx]

    @classmethod
    def from_arrays(cls, inputs: np.ndarray, targets: np.ndarray) -> "TrainingSet":
        """Wrap explicit ``(N,4,80,80)`` inputs, e.g. synthetic tasks."""
        n = len(inputs)
        frames = np.asarray(inputs, dtype=np.float32).reshape(n * STACK_DEPTH, STACK_SIZE, STACK_SIZE)
        stacks = np.arange(n * STACK_DEPTH).reshape(n, STACK_DEPTH)
        return cls(frames, stacks, np.asarray(targets, dtype=np.float64))


def window_counts(actions: Sequence[int], t: int, delta: int, n_actions: int = N_ACTIONS) -> np.ndarray:
    return np.bincount(np.asarray(actions[t : t + delta], dtype=np.int64), minlength=n_actions)


def build_dataset(logs: Sequence[TrajectoryLog], delta: int = 10, n_actions: int = N_ACTIONS) -> TrainingSet:
    """Pair each frame stack with the action counts of the next ``delta`` decisions.

    The window for tick ``t`` covers the actions taken at ``t .. t+delta-1``.
    Windows that contain a negative reward are dropped.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    all_frames = []
    stacks = []
    targets = []
    offset = 0
    for log in logs:
        if log.frames is None:
            raise ValueError("build_dataset needs logs recorded with frames")
        recs = log.records
        actions = [r.action for r in recs]
        negative = np.cumsum([0] + [1 if r.reward < 0 else 0 for r in recs])
        fidx = [r.frame_idx for r in recs]
        for t in range(len(recs) - delta + 1):
            if negative[t + delta] - negative[t] > 0:
                continue
            hist = [fidx[max(t - k, 0)] for k in range(STACK_DEPTH - 1, -1, -1)]
            stacks.append([offset + i for i in hist])
            targets.append(window_counts(actions, t, delta, n_actions))
        all_frames.append(log.frames)
        offset += len(log.frames)
    frames = (
        np.concatenate(all_frames).astype(np.float32, copy=False)
        if all_frames
        else np.zeros((0, STACK_SIZE, STACK_SIZE), np.float32)
    )
    return TrainingSet(
        frames=frames,
        stacks=np.asarray(stacks, dtype=np.int64).reshape(-1, STACK_DEPTH),
        targets=np.asarray(targets, dtype=np.float64).reshape(-1, n_actions),
        delta=delta,
    )


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    minibatch_size: int = 32
    epochs: int = 10
    delta_window: int = 10
    rng_seed: int = 0
    alpha_floor: float = DEFAULT_ALPHA_FLOOR

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.minibatch_size < 1 or self.epochs < 1 or self.delta_window < 1:
            raise ValueError("invalid training configuration")
        if not self.alpha_floor > 0:
            raise ValueError("alpha_floor must be positive")

    def to_dict(self) -> dict:
        return dict(
            learning_rate=self.learning_rate,
            minibatch_size=self.minibatch_size,
            epochs=self.epochs,
            delta_window=self.delta_window,
            rng_seed=self.rng_seed,
            alpha_floor=self.alpha_floor,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class FitResult:
    params: CnnParams
    history: list[float] = field(default_factory=list)  # history[0] is the pre-training loss


def dataset_loss(kappa: CnnParams, data: TrainingSet, chunk: int = 256) -> float:
    total = 0.0
    for x, y in data.batches(chunk):
        total += loss(kappa, x, y) * len(y)
    return total / len(data)


def sgd_fit(kappa: CnnParams, data: TrainingSet, cfg: TrainConfig) -> FitResult:
    """Shuffled minibatch SGD; deterministic given ``cfg.rng_seed``."""
    if len(data) == 0:
        raise ValueError("empty training set")
    params = kappa.copy()
    rng = np.random.default_rng(cfg.rng_seed)
    lr = params.dtype.type(cfg.learning_rate)
    history = [dataset_loss(params, data)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for x, y in data.batches(cfg.minibatch_size, order):
            value, grads = loss_and_grad(params, x, y)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch + 1}")
            for name, g in grads.items():
                params.tensors[name] -= lr * g
        epoch_loss = dataset_loss(params, data)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite loss after epoch {epoch + 1}")
        history.append(epoch_loss)
    return FitResult(params, history)


# -- weight files ----------------------------------------------------------------

MAGIC = b"IPPW1"
VERSION = 1


def save_params(kappa: CnnParams, path) -> None:
    """Write little-endian float32 tensors preceded by a small header."""
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(kappa.tensors))
    for name, arr in kappa.items():
        raw = name.encode()
        out += struct.pack("<B", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path, n_actions: int | None = None, alpha_floor: float = DEFAULT_ALPHA_FLOOR) -> CnnParams:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"{path}: truncated file")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HH", take(4))
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<B", take(1))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise WeightFileError(f"{path}: trailing bytes")
    got = tensors.get("out.bias")
    if n_actions is not None and (got is None or got.shape != (n_actions,)):
        raise WeightFileError(f"{path}: weight file is not for {n_actions} actions")
    try:
        return CnnParams(tensors, alpha_floor)
    except ValueError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc


# -- gradient checking -----------------------------------------------------------


def _relu_pattern(kappa: CnnParams, x: np.ndarray) -> list[np.ndarray]:
    _, cache = _forward(kappa, x, keep=True)
    return [c[3] for c in cache[:-1]] + [cache[-1][1]]


@dataclass
class GradCheck:
    names: list[str]
    indices: list[tuple[int, ...]]
    analytic: np.ndarray
    numeric: np.ndarray
    steps: np.ndarray

    @property
    def relative_error(self) -> np.ndarray:
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-8)
        return np.abs(self.analytic - self.numeric) / scale


def gradient_check(
    kappa: CnnParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    n_params: int = 100,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
    min_h: float = 1e-9,
) -> GradCheck:
    """Compare :func:`backward` with central differences at random parameters.

    A step that moves any ReLU across its kink makes the difference quotient
    meaningless, so for that parameter the step is divided by ten until the
    activation pattern at ``w - h`` and ``w + h`` agrees.
    """
    rng = rng or np.random.default_rng(0)
    kappa = kappa.astype(np.float64)
    inputs = _check_input(inputs).astype(np.float64)
    grads = backward(kappa, inputs, targets)
    names = list(kappa.tensors)
    picked_names, picked_idx, ana, num, steps = [], [], [], [], []
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(s)) for s in kappa[name].shape)
        w = kappa[name]
        old = w[idx]
        step = h
        while True:
            w[idx] = old + step
            plus, mask_p = loss(kappa, inputs, targets), _relu_pattern(kappa, inputs)
            w[idx] = old - step
            minus, mask_m = loss(kappa, inputs, targets), _relu_pattern(kappa, inputs)
            w[idx] = old
            same = all(np.array_equal(a, b) for a, b in zip(mask_p, mask_m))
            if same or step / 10 < min_h:
                break
            step /= 10
        picked_names.append(name)
        picked_idx.append(idx)
        ana.append(grads[name][idx])
        num.append((plus - minus) / (2 * step))
        steps.append(step)
    return GradCheck(picked_names, picked_idx, np.array(ana), np.array(num), np.array(steps))
