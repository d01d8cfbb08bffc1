"""Toy insertion model, its batched loss graph, trainer and checkpoints.

Per gap the model sees the embeddings of both neighbours, a mean-pooled
summary of the whole sequence and a few position features; two tanh layers
feed the pi / lambda / q heads. It gets no text time, so insertion heads are
time-independent. A separate two-layer network predicts each image's velocity
from its current values, its own time and the same pooled context.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from eflab import autodiff as ad
from eflab.autodiff import Tensor
from eflab.corruption import CorruptionRecord, corrupt
from eflab.errors import ConfigError, DataError, NumericError
from eflab.losses import LAMBDA_FLOOR, InsertionHeads, text_normalizer
from eflab.schedule import Schedule
from eflab.sequence import MixedSequence, Vocabulary, is_image

CHECKPOINT_MAGIC = b"EFLBCKPT"
CHECKPOINT_VERSION = 1
IMAGE_PARAMS = ("img_w1", "img_b1", "img_w2", "img_b2", "vel_w", "vel_b")


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    n_img: int = 2
    d: int = 16
    d_h: int = 32
    max_len: int = 16
    use_text_time: bool = False

    @property
    def boundary_id(self) -> int:
        return self.vocab_size + 1

    @property
    def gap_features(self) -> int:
        return 3 * self.d + 3 + int(self.use_text_time)

    @property
    def image_features(self) -> int:
        return self.n_img + 3 + 2 * self.d


def _shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    K = dims.vocab_size + 1
    return {
        "embed": (dims.vocab_size + 2, dims.d),
        "gap_w1": (dims.gap_features, dims.d_h),
        "gap_b1": (dims.d_h,),
        "gap_w2": (dims.d_h, dims.d_h),
        "gap_b2": (dims.d_h,),
        "pi_w": (dims.d_h, 1),
        "pi_b": (1,),
        "lam_w": (dims.d_h, 1),
        "lam_b": (1,),
        "q_w": (dims.d_h, K),
        "q_b": (K,),
        "img_w1": (dims.image_features, dims.d_h),
        "img_b1": (dims.d_h,),
        "img_w2": (dims.d_h, dims.d_h),
        "img_b2": (dims.d_h,),
        "vel_w": (dims.d_h, dims.n_img),
        "vel_b": (dims.n_img,),
    }


@dataclass
class ModelParams:
    dims: ModelDims
    values: dict[str, np.ndarray]

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator, scale: float = 0.05) -> ModelParams:
        values = {}
        for name, shape in _shapes(dims).items():
            if name.split("_")[-1].startswith("b"):
                values[name] = np.zeros(shape)
            else:
                values[name] = rng.uniform(-scale, scale, size=shape)
        return cls(dims, values)

    def names(self) -> list[str]:
        return list(_shapes(self.dims))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.values[n].ravel() for n in self.names()])

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        out, at = {}, 0
        for name, shape in _shapes(self.dims).items():
            size = int(np.prod(shape))
            out[name] = np.array(vec[at : at + size]).reshape(shape)
            at += size
        return ModelParams(self.dims, out)

    def copy(self) -> ModelParams:
        return ModelParams(self.dims, {k: v.copy() for k, v in self.values.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values.values())


# -- batched forward -------------------------------------------------------------


def _time_features(t: float) -> list[float]:
    return [t, t * t, t * t * t]


def _element_id(el, dims: ModelDims) -> int:
    return dims.vocab_size if is_image(el) else int(el)


@dataclass
class _Layout:
    """Index bookkeeping for a batch of sequences flattened into one graph."""

    elem_ids: np.ndarray
    pool: np.ndarray  # (B, total elements) mean-pooling matrix
    gap_left: np.ndarray
    gap_right: np.ndarray
    gap_record: np.ndarray
    gap_pos: np.ndarray  # (total gaps, 3 or 4)
    gap_offsets: list[int]
    img_record: np.ndarray
    img_left: np.ndarray
    img_feats: np.ndarray  # (images, n_img + 3)
    img_keys: list[tuple[int, int]]  # (record, element index)


def _layout(states: Sequence[tuple[MixedSequence, float]], dims: ModelDims) -> _Layout:
    B = len(states)
    total = sum(len(s) for s, _ in states)
    pool = np.zeros((B, max(total, 1)))
    elem_ids, gl, gr, grec, gpos, offsets = [], [], [], [], [], []
    irec, ileft, ifeat, ikeys = [], [], [], []
    at = 0
    gaps = 0
    N = float(dims.max_len)
    for b, (seq, t_text) in enumerate(states):
        ids = [_element_id(el, dims) for el in seq]
        n = len(ids)
        elem_ids.extend(ids)
        if n:
            pool[b, at : at + n] = 1.0 / n
        at += n
        offsets.append(gaps)
        gaps += n + 1
        for g in range(n + 1):
            gl.append(ids[g - 1] if g > 0 else dims.boundary_id)
            gr.append(ids[g] if g < n else dims.boundary_id)
            grec.append(b)
            feats = [g / N, (n - g) / N, float(g == seq.prompt_len)]
            if dims.use_text_time:
                feats.append(float(t_text))
            gpos.append(feats)
        for i in seq.image_indices():
            if i < seq.prompt_len:
                continue
            img = seq[i]
            if img.dim != dims.n_img:
                raise DataError(f"image of dimension {img.dim}, model expects {dims.n_img}")
            irec.append(b)
            ileft.append(ids[i - 1] if i > 0 else dims.boundary_id)
            ifeat.append(np.concatenate([img.values, _time_features(img.t)]))
            ikeys.append((b, i))
    return _Layout(
        elem_ids=np.array(elem_ids, dtype=np.intp),
        pool=pool,
        gap_left=np.array(gl, dtype=np.intp),
        gap_right=np.array(gr, dtype=np.intp),
        gap_record=np.array(grec, dtype=np.intp),
        gap_pos=np.array(gpos, dtype=np.float64).reshape(len(gl), -1),
        gap_offsets=offsets,
        img_record=np.array(irec, dtype=np.intp),
        img_left=np.array(ileft, dtype=np.intp),
        img_feats=np.array(ifeat, dtype=np.float64).reshape(len(irec), dims.n_img + 3),
        img_keys=ikeys,
    )


@dataclass
class GraphOutputs:
    layout: _Layout
    pi_score: Tensor  # (gaps, 1)
    lam_score: Tensor  # (gaps, 1)
    q_logits: Tensor  # (gaps, K)
    velocity: Tensor | None  # (images, n_img)


def _graph(P: dict[str, Tensor], dims: ModelDims, layout: _Layout) -> GraphOutputs:
    E = P["embed"]
    if layout.elem_ids.size:
        pooled = ad.matmul(layout.pool, ad.take(E, layout.elem_ids))
    else:
        pooled = Tensor(np.zeros((layout.pool.shape[0], dims.d)))
    feats = ad.concat(
        [
            ad.take(E, layout.gap_left),
            ad.take(E, layout.gap_right),
            ad.take(pooled, layout.gap_record),
            layout.gap_pos,
        ],
        axis=1,
    )
    h = ad.tanh(feats @ P["gap_w1"] + P["gap_b1"])
    h = ad.tanh(h @ P["gap_w2"] + P["gap_b2"])
    velocity = None
    if layout.img_keys:
        ifeats = ad.concat(
            [layout.img_feats, ad.take(pooled, layout.img_record), ad.take(E, layout.img_left)], axis=1
        )
        hv = ad.tanh(ifeats @ P["img_w1"] + P["img_b1"])
        hv = ad.tanh(hv @ P["img_w2"] + P["img_b2"])
        velocity = hv @ P["vel_w"] + P["vel_b"]
    return GraphOutputs(
        layout=layout,
        pi_score=h @ P["pi_w"] + P["pi_b"],
        lam_score=h @ P["lam_w"] + P["lam_b"],
        q_logits=h @ P["q_w"] + P["q_b"],
        velocity=velocity,
    )


def _tensors(params: ModelParams, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.values.items()}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(
    params: ModelParams, states: Sequence[tuple[MixedSequence, float]]
) -> list[tuple[InsertionHeads, dict[int, np.ndarray]]]:
    layout = _layout(states, params.dims)
    out = _graph(_tensors(params, False), params.dims, layout)
    pi = _sigmoid(out.pi_score.data[:, 0])
    lam = np.logaddexp(0.0, out.lam_score.data[:, 0]) + LAMBDA_FLOOR
    q = _softmax(out.q_logits.data)
    results = []
    for b, (seq, _) in enumerate(states):
        lo = layout.gap_offsets[b]
        hi = lo + len(seq) + 1
        results.append((InsertionHeads(pi[lo:hi], lam[lo:hi], q[lo:hi]), {}))
    if out.velocity is not None:
        for row, (b, i) in enumerate(layout.img_keys):
            results[b][1][i] = out.velocity.data[row].copy()
    return results


def forward(params: ModelParams, x_t: MixedSequence, t_text: float = 0.0):
    """Heads for every gap of ``x_t`` plus a velocity for each generated image."""
    return forward_batch(params, [(x_t, t_text)])[0]


# -- loss graph ------------------------------------------------------------------


@dataclass
class BatchLoss:
    total: Tensor
    text: np.ndarray  # per record
    image: np.ndarray  # per record
    token_ce: np.ndarray
    poisson: np.ndarray
    bce: np.ndarray


def batch_loss(
    params: ModelParams,
    records: Sequence[CorruptionRecord],
    weight_img: float = 1.0,
    reduction: str = "mean",
    tensors: dict[str, Tensor] | None = None,
) -> BatchLoss:
    dims = params.dims
    P = tensors if tensors is not None else _tensors(params, True)
    states = [(r.x_t, r.t_text) for r in records]
    layout = _layout(states, dims)
    out = _graph(P, dims, layout)
    G = layout.gap_left.shape[0]
    K = dims.vocab_size + 1
    B = len(records)

    counts = np.zeros(G)
    bag = np.zeros((G, K))
    gap_w = np.zeros(G)
    for b, rec in enumerate(records):
        lo = layout.gap_offsets[b]
        inv_n = 1.0 / text_normalizer(len(rec.x_t))
        for g in rec.x_t.active_gaps():
            gap_w[lo + g] = inv_n
            counts[lo + g] = len(rec.bags[g])
            for a in rec.bags[g]:
                bag[lo + g, a] += 1.0
    nonzero = (counts > 0).astype(np.float64)
    sign = np.where(counts > 0, 1.0, -1.0)[:, None]

    s = out.pi_score
    # -log(pi) = softplus(-s) on zero counts, -log(1 - pi) = softplus(s) otherwise
    bce = ad.sum(ad.softplus(ad.mul(s, sign)), axis=1)
    lam = ad.add(ad.sum(ad.softplus(out.lam_score), axis=1), LAMBDA_FLOOR)
    pois = ad.mul(ad.sub(lam, ad.mul(ad.log(lam), counts)), nonzero)
    ce = ad.neg(ad.sum(ad.mul(ad.log_softmax(out.q_logits), bag), axis=1))

    gap_to_rec = np.zeros((B, G))
    gap_to_rec[layout.gap_record, np.arange(G)] = gap_w
    text = ad.matmul(gap_to_rec, ad.add(ad.add(ce, pois), bce))

    img_per_rec = np.zeros(B)
    total = text
    if out.velocity is not None:
        target = np.zeros((len(layout.img_keys), dims.n_img))
        img_w = np.zeros((B, len(layout.img_keys)))
        for row, (b, i) in enumerate(layout.img_keys):
            pair = records[b].flow_pairs.get(i)
            if pair is None:
                continue
            y0, y1 = pair
            target[row] = y1 - y0
            img_w[b, row] = 1.0
        per_rec = img_w.sum(axis=1, keepdims=True)
        img_w = np.divide(img_w, per_rec, out=np.zeros_like(img_w), where=per_rec > 0)
        mse = ad.mean(ad.square(ad.sub(out.velocity, target)), axis=1)
        image = ad.matmul(img_w, mse)
        img_per_rec = image.data
        total = ad.add(text, ad.mul(image, weight_img))

    if reduction == "mean":
        scalar = ad.mean(total)
    elif reduction == "sum":
        scalar = ad.sum(total)
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    return BatchLoss(
        total=scalar,
        text=text.data,
        image=img_per_rec,
        token_ce=gap_to_rec @ ce.data,
        poisson=gap_to_rec @ pois.data,
        bce=gap_to_rec @ bce.data,
    )


def loss_and_grad(
    params: ModelParams, records: Sequence[CorruptionRecord], weight_img: float = 1.0, reduction: str = "mean"
) -> tuple[float, dict[str, np.ndarray], BatchLoss]:
    P = _tensors(params, True)
    res = batch_loss(params, records, weight_img, reduction, tensors=P)
    res.total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return res.total.item(), grads, res


# -- training --------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.05
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    mode: str = "text_only"
    weight_img: float = 1.0
    clip_norm: float = 5.0
    p_mix: float = 1.0
    p_uncond: float = 0.0
    optimizer: str = "sgd"
    lr_decay: str = "constant"  # or "linear": anneal to zero over the run
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch size must be at least 1 and steps non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("constant", "linear"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if not (0.0 <= self.p_mix <= 1.0 and 0.0 <= self.p_uncond <= 1.0):
            raise ConfigError("p_mix and p_uncond are probabilities")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)


def _draw_record(seq: MixedSequence, cfg: TrainConfig, s: Schedule, vocab_size: int, rng) -> CorruptionRecord:
    if cfg.p_uncond > 0 and rng.random() < cfg.p_uncond:
        seq = seq.without_prompt()
    if cfg.mode == "interleaved" and cfg.p_mix < 1.0 and rng.random() >= cfg.p_mix:
        # sequential record: finished text, image at a uniform noise level
        return corrupt(seq, s, "independent", rng, tau_text=1.0, image_token_id=vocab_size)
    return corrupt(seq, s, cfg.mode, rng, image_token_id=vocab_size)


def train(
    data: Sequence[MixedSequence] | Sequence[tuple[MixedSequence, float]],
    cfg: TrainConfig,
    s: Schedule,
    dims: ModelDims,
    params: ModelParams | None = None,
    log=None,
) -> TrainResult:
    """Corrupt, forward, take a clipped gradient step; repeat."""
    if not data:
        raise DataError("training needs a non-empty dataset")
    if isinstance(data[0], tuple):
        seqs = [x for x, _ in data]
        weights = np.array([w for _, w in data], dtype=float)
        weights /= weights.sum()
    else:
        seqs, weights = list(data), None
    rng = np.random.default_rng(cfg.seed)
    init_rng, data_rng = rng.spawn(2)
    params = params.copy() if params is not None else ModelParams.init(dims, init_rng)
    names = params.names()
    m = {k: np.zeros_like(v) for k, v in params.values.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.values.items()}
    history = []
    for step in range(cfg.steps):
        idx = data_rng.choice(len(seqs), size=cfg.batch_size, p=weights)
        records = [_draw_record(seqs[i], cfg, s, dims.vocab_size, data_rng) for i in idx]
        loss, grads, res = loss_and_grad(params, records, cfg.weight_img)
        if not np.isfinite(loss) or loss > cfg.divergence_limit:
            raise NumericError(f"training diverged at step {step}: loss {loss}")
        norm = float(np.sqrt(sum(np.sum(grads[k] ** 2) for k in names)))
        scale = min(1.0, cfg.clip_norm / norm) if norm > 0 and cfg.clip_norm > 0 else 1.0
        lr = cfg.lr * (1.0 - step / cfg.steps) if cfg.lr_decay == "linear" else cfg.lr
        for k in names:
            g = grads[k] * scale
            if cfg.optimizer == "sgd":
                params.values[k] -= lr * g
            else:
                m[k] = 0.9 * m[k] + 0.1 * g
                v2[k] = 0.999 * v2[k] + 0.001 * g * g
                mh = m[k] / (1 - 0.9 ** (step + 1))
                vh = v2[k] / (1 - 0.999 ** (step + 1))
                params.values[k] -= lr * mh / (np.sqrt(vh) + 1e-8)
        if not params.is_finite():
            raise NumericError(f"non-finite parameters after step {step}")
        entry = {
            "step": step,
            "loss": loss,
            "text": float(np.mean(res.text)),
            "image": float(np.mean(res.image)),
            "grad_norm": norm,
        }
        history.append(entry)
        if log is not None:
            log(entry)
    return TrainResult(params, history)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams, vocab: Vocabulary | None = None, schedule: Schedule | None = None) -> None:
    """Binary header + little-endian float64 blob, with a JSON sidecar describing it."""
    path = Path(path)
    blob = params.flat().astype("<f8").tobytes()
    header = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(blob) // 8)
    path.write_bytes(header + blob)
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": asdict(params.dims),
        "params": [[name, list(shape)] for name, shape in _shapes(params.dims).items()],
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if vocab is not None:
        meta["vocab"] = {"size": vocab.size, "names": list(vocab.names) if vocab.names else None}
    if schedule is not None:
        meta["schedule"] = schedule.to_config()
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    raw = path.read_bytes()
    hdr = len(CHECKPOINT_MAGIC) + 12
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    version, count = struct.unpack("<IQ", raw[len(CHECKPOINT_MAGIC) : hdr])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    meta = json.loads(Path(str(path) + ".json").read_text())
    dims = ModelDims(**meta["dims"])
    vec = np.frombuffer(raw[hdr:], dtype="<f8")
    if vec.size != count:
        raise DataError("truncated checkpoint")
    if hashlib.sha256(raw[hdr:]).hexdigest() != meta["sha256"]:
        raise DataError("checkpoint blob does not match its sidecar hash")
    template = ModelParams(dims, {k: np.zeros(s) for k, s in _shapes(dims).items()})
    return template.with_flat(vec.astype(np.float64)), meta


class ToyModel:
    """Sampler-facing wrapper around trained parameters."""

    def __init__(self, params: ModelParams):
        self.params = params

    def insertion_heads(self, seq: MixedSequence, t_text: float) -> InsertionHeads:
        return forward(self.params, seq, t_text)[0]

    def velocities(self, seq: MixedSequence, t_text: float) -> dict[int, np.ndarray]:
        vel = forward(self.params, seq, t_text)[1]
        return {i: v for i, v in vel.items() if seq[i].t < 1.0}

    def predict(self, seq: MixedSequence, t_text: float):
        heads, vel = forward(self.params, seq, t_text)
        return heads, {i: v for i, v in vel.items() if seq[i].t < 1.0}
