"""Desk-scale training loop: Adam on synthetic hazy/clear pairs."""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .density import DEFAULT_PATCH, check_patch, with_cdm
from .imaging import decode_image
from .losses import FeatureExtractor, LossBreakdown, LossWeights, loss_final
from .network import FalconConfig, ModelWeights, falcon_forward, init_weights, save_weights, trainable
from .tensor import StateError, Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 5
    steps: int = 200
    seed: int = 0
    crop_size: int = 64
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 1.0
    patch_size: int = DEFAULT_PATCH
    checkpoint_every: int = 0
    flip_prob: float = field(default=0.5, metadata={"file": False})

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.crop_size < 1:
            raise ConfigError("crop_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        try:
            check_patch(self.patch_size)
            self.loss_weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    @classmethod
    def file_keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.metadata.get("file", True)]

    @classmethod
    def parse(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in cls.file_keys():
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = int(raw) if types[key] in ("int", int) else float(raw)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.parse(Path(path).read_text(), **overrides)

    def dumps(self) -> str:
        d = asdict(self)
        return "".join(f"{k} = {d[k]}\n" for k in self.file_keys())


# -- optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update of every entry of ``weights`` (in place)."""
    for name in weights:
        if grads.get(name) is None:
            raise StateError(f"adam_step: missing gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, w in weights.items():
        g = np.asarray(grads[name], dtype=np.float32)
        data = w.data if isinstance(w, Tensor) else w
        if g.shape != data.shape:
            raise StateError(f"adam_step: gradient shape {g.shape} does not match {name!r} {data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(data.dtype)
    return weights, state


# -- data --------------------------------------------------------------------------


def augment(pair: tuple[np.ndarray, np.ndarray], seed, crop_size: int | None = None, flip_prob: float = 0.5):
    """Apply one random horizontal/vertical flip and crop identically to both HWC images.

    ``seed`` may be an int or a sequence (e.g. ``(seed, step, index)``).
    """
    hazy, clear = pair
    if hazy.shape != clear.shape:
        raise ValueError(f"augment: pair shapes differ {hazy.shape} vs {clear.shape}")
    h, w = hazy.shape[:2]
    crop = crop_size or min(h, w)
    if crop > min(h, w):
        raise ValueError(f"crop size {crop} exceeds image extent {h}x{w}")
    rng = np.random.default_rng(seed)
    flip_h = rng.random() < flip_prob
    flip_v = rng.random() < flip_prob
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    out = []
    for img in (hazy, clear):
        if flip_h:
            img = img[:, ::-1]
        if flip_v:
            img = img[::-1]
        out.append(np.ascontiguousarray(img[y0 : y0 + crop, x0 : x0 + crop]))
    return out[0], out[1]


def _image_files(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_pairs(dataset_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read ``hazy/`` and ``clear/`` subdirectories, pairing files by stem."""
    root = Path(dataset_dir)
    hazy_dir, clear_dir = root / "hazy", root / "clear"
    if not hazy_dir.is_dir() or not clear_dir.is_dir():
        raise ConfigError(f"{root} must contain hazy/ and clear/ subdirectories")
    hazy, clear = _image_files(hazy_dir), _image_files(clear_dir)
    unpaired = sorted(set(hazy) ^ set(clear))
    if unpaired:
        raise ConfigError(f"unpaired files in {root}: {', '.join(unpaired)}")
    if not hazy:
        raise ConfigError(f"no images found in {root}")
    pairs = []
    for stem in sorted(hazy):
        a, b = decode_image(hazy[stem]), decode_image(clear[stem])
        if a.shape != b.shape:
            raise ConfigError(f"pair {stem}: shapes differ {a.shape} vs {b.shape}")
        pairs.append((a, b))
    return pairs


def batch_indices(n_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of per-epoch seeded permutations."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n_items)
        perm = np.random.default_rng([seed, epoch]).permutation(n_items)
        out.extend(perm[offset : offset + batch_size - len(out)].tolist())
    return np.array(out)


def make_batch(pairs, config: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    idx = batch_indices(len(pairs), config.batch_size, config.seed, step)
    hazy, clear = [], []
    for j, i in enumerate(idx):
        a, b = augment(pairs[i], (config.seed, step, j), config.crop_size, config.flip_prob)
        hazy.append(a)
        clear.append(b)
    return np.stack(hazy).transpose(0, 3, 1, 2).copy(), np.stack(clear).transpose(0, 3, 1, 2).copy()


class Prefetcher:
    """Background producer of batches through a bounded queue (capacity 2)."""

    def __init__(self, pairs, config: TrainConfig, start: int, stop: int, capacity: int = 2):
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(pairs, config, start, stop), daemon=True)
        self._thread.start()

    def _run(self, pairs, config, start, stop):
        try:
            for step in range(start, stop):
                item = make_batch(pairs, config, step)
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except Exception as exc:  # surfaced to the consumer
            self._queue.put(exc)

    def get(self):
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


# -- loop ----------------------------------------------------------------------------


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    weights_path: str | None = None

    def column(self, key: str) -> np.ndarray:
        return np.array([h[key] for h in self.history])

    def to_csv(self, path) -> None:
        keys = ["step", "total", "img", "per", "map"]
        lines = [",".join(keys)] + [",".join(repr(h[k]) for k in keys) for h in self.history]
        Path(path).write_text("\n".join(lines) + "\n")


class Trainer:
    def __init__(self, config: TrainConfig, model_config: FalconConfig | None = None,
                 weights: ModelWeights | None = None, extractor: FeatureExtractor | None = None):
        self.config = config
        self.model_config = model_config or FalconConfig.toy()
        self.model_config.check_spatial(config.crop_size, config.crop_size)
        self.weights = weights if weights is not None else init_weights(self.model_config, config.seed)
        self.extractor = extractor if extractor is not None or config.beta == 0 else FeatureExtractor()
        self.state = AdamState()

    def forward_loss(self, hazy: np.ndarray, clear: np.ndarray) -> LossBreakdown:
        x = with_cdm(Tensor(hazy), self.config.patch_size)
        pred = falcon_forward(x, self.weights, "train", self.model_config)
        return loss_final(pred, Tensor(clear), self.config.loss_weights, self.extractor, self.config.patch_size)

    def step(self, hazy: np.ndarray, clear: np.ndarray) -> LossBreakdown:
        losses = self.forward_loss(hazy, clear)
        if not np.isfinite(float(losses.total.data)):
            raise FloatingPointError(f"non-finite loss at step {self.state.step}")
        losses.total.backward()
        params = trainable(self.weights)
        adam_step(params, {k: p.grad for k, p in params.items()}, self.state, self.config.learning_rate)
        return losses


def train(config: TrainConfig, dataset_dir, out_weights_path=None, model_config: FalconConfig | None = None,
          trainer: Trainer | None = None) -> TrainReport:
    """Run ``config.steps`` optimisation steps; checkpoints go next to ``out_weights_path``."""
    pairs = load_pairs(dataset_dir)
    h, w = pairs[0][0].shape[:2]
    if config.crop_size > min(h, w):
        raise ConfigError(f"crop_size {config.crop_size} exceeds image extent {h}x{w}")
    trainer = trainer or Trainer(config, model_config)
    report = TrainReport()
    out = Path(out_weights_path) if out_weights_path is not None else None
    feed = Prefetcher(pairs, config, 0, config.steps)
    try:
        for step in range(config.steps):
            hazy, clear = feed.get()
            losses = trainer.step(hazy, clear)
            report.history.append(
                {"step": step, "total": float(losses.total.data), "img": losses.img, "per": losses.per, "map": losses.map}
            )
            if step % 10 == 0 or step == config.steps - 1:
                log.info("step %d total %.5f img %.5f per %.5f map %.5f", step, report.history[-1]["total"],
                         losses.img, losses.per, losses.map)
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                ckpt = out.with_name(f"{out.stem}.step{step + 1}{out.suffix}")
                save_weights(trainer.weights, ckpt)
                report.checkpoints.append(str(ckpt))
    finally:
        feed.close()
    if out is not None:
        save_weights(trainer.weights, out)
        report.weights_path = str(out)
    return report
