"""Toy paired text/image datasets.

A record picks a class, writes the class prompt, then a caption whose tokens
come either from a fixed template or from the class token distribution, and
finally a random number of 2-D (or N-D) point images drawn around the class
mean. Because the class is fixed by the prompt and caption, image values are
predictable from the preceding tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from eflab.errors import ConfigError
from eflab.sequence import ImageBlock, MixedSequence, Vocabulary, is_image

TOL = 1e-12
POSITIONS = ("end", "random")


@dataclass(frozen=True)
class ClassSpec:
    weight: float
    mean: tuple[float, ...]
    std: float
    prompt: tuple[int, ...] = ()
    caption: tuple[int, ...] | None = None
    token_probs: tuple[float, ...] | None = None  # used when caption is None


@dataclass(frozen=True)
class GeneratorSpec:
    vocab_size: int
    classes: tuple[ClassSpec, ...]
    length_hist: tuple[float, ...] = (1.0,)
    image_count: dict[int, float] = field(default_factory=lambda: {0: 1.0})
    image_position: str = "end"
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if not self.classes:
            raise ConfigError("at least one class is required")
        _check_dist([c.weight for c in self.classes], "class weights")
        _check_dist(self.length_hist, "length histogram")
        _check_dist(list(self.image_count.values()), "image-count distribution")
        if any(int(k) < 0 for k in self.image_count):
            raise ConfigError("image counts must be non-negative")
        if self.image_position not in POSITIONS:
            raise ConfigError(f"image_position must be one of {POSITIONS}")
        dims = {len(c.mean) for c in self.classes}
        if len(dims) != 1 or 0 in dims:
            raise ConfigError("all classes need image means of the same positive dimension")
        for c in self.classes:
            if c.std < 0:
                raise ConfigError("std must be non-negative")
            toks = list(c.prompt) + list(c.caption or ())
            if any(not 0 <= a < self.vocab_size for a in toks):
                raise ConfigError(f"token outside vocabulary in class {c}")
            if c.caption is None:
                if c.token_probs is None or len(c.token_probs) != self.vocab_size:
                    raise ConfigError("a class without a caption needs token_probs over the vocabulary")
                _check_dist(c.token_probs, "token_probs")
        longest = max(len(c.prompt) + (len(c.caption) if c.caption is not None else len(self.length_hist) - 1) for c in self.classes)
        if longest + max(int(k) for k in self.image_count) > self.max_len:
            raise ConfigError(f"spec can produce records longer than max_len={self.max_len}")

    @property
    def n_img(self) -> int:
        return len(self.classes[0].mean)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)

    @classmethod
    def from_json(cls, obj: dict) -> GeneratorSpec:
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        try:
            classes = tuple(
                ClassSpec(
                    weight=float(c["weight"]),
                    mean=tuple(float(x) for x in c["mean"]),
                    std=float(c["std"]),
                    prompt=tuple(int(a) for a in c.get("prompt", ())),
                    caption=None if c.get("caption") is None else tuple(int(a) for a in c["caption"]),
                    token_probs=None if c.get("token_probs") is None else tuple(float(p) for p in c["token_probs"]),
                )
                for c in obj["classes"]
            )
            kw = dict(obj)
            kw["classes"] = classes
            if "length_hist" in kw:
                kw["length_hist"] = tuple(float(p) for p in kw["length_hist"])
            if "image_count" in kw:
                kw["image_count"] = {int(k): float(v) for k, v in kw["image_count"].items()}
            return cls(**kw)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed generator spec: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> GeneratorSpec:
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        out = asdict(self)
        out["image_count"] = {str(k): v for k, v in self.image_count.items()}
        return out


def _check_dist(p: Sequence[float], what: str) -> None:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > TOL:
        raise ConfigError(f"{what} must be a normalized distribution, got {p.tolist()}")


def paired_spec(n_classes: int = 2, radius: float = 2.0, std: float = 0.25, p_image: float = 0.5, seed: int = 0) -> GeneratorSpec:
    """Class prompt token, one class word, then zero or one image near the class centroid."""
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    classes = tuple(
        ClassSpec(
            weight=1.0 / n_classes,
            mean=(float(radius * np.cos(a)), float(radius * np.sin(a))),
            std=std,
            prompt=(c,),
            caption=(n_classes + c,),
        )
        for c, a in enumerate(angles)
    )
    return GeneratorSpec(
        vocab_size=2 * n_classes,
        classes=classes,
        image_count={0: 1.0 - p_image, 1: p_image},
        max_len=4,
        seed=seed,
    )


def _class_index(spec: GeneratorSpec, rng: np.random.Generator) -> int:
    return int(rng.choice(len(spec.classes), p=[c.weight for c in spec.classes]))


def generate(spec: GeneratorSpec, count: int, rng: np.random.Generator | None = None) -> list[MixedSequence]:
    if count < 1:
        raise ConfigError("count must be at least 1")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    counts = sorted(spec.image_count)
    count_p = [spec.image_count[k] for k in counts]
    out = []
    for _ in range(count):
        c = spec.classes[_class_index(spec, rng)]
        if c.caption is not None:
            caption = list(c.caption)
        else:
            length = int(rng.choice(len(spec.length_hist), p=spec.length_hist))
            caption = [int(a) for a in rng.choice(spec.vocab_size, size=length, p=c.token_probs)]
        n_images = counts[int(rng.choice(len(counts), p=count_p))]
        target: list = list(caption)
        mean = np.asarray(c.mean)
        for _ in range(n_images):
            img = ImageBlock(mean + c.std * rng.standard_normal(mean.size), 1.0)
            if spec.image_position == "end":
                target.append(img)
            else:
                # keep the first caption token ahead of any image so the class is readable
                lo = 1 if caption else 0
                target.insert(int(rng.integers(lo, len(target) + 1)), img)
        out.append(MixedSequence(tuple(c.prompt) + tuple(target), len(c.prompt), spec.max_len))
    return out


def exact_distribution(spec: GeneratorSpec) -> dict[tuple[int, ...], float]:
    """Law of the symbol sequences (images as the image token) for fixed-caption, end-position specs."""
    if spec.image_position != "end" or any(c.caption is None for c in spec.classes):
        raise ConfigError("exact distribution needs fixed captions and end-position images")
    img = spec.vocab_size
    out: dict[tuple[int, ...], float] = {}
    for c in spec.classes:
        for k, p in spec.image_count.items():
            key = tuple(c.prompt) + tuple(c.caption) + (img,) * int(k)
            out[key] = out.get(key, 0.0) + c.weight * p
    return out


def stats(data: Sequence[MixedSequence], vocab_size: int, max_len: int = 32, max_images: int = 8) -> dict:
    """Empirical histograms and per-prompt image moments; JSON-serializable."""
    length_hist = [0] * (max_len + 1)
    token_counts = [0] * vocab_size
    image_hist = [0] * (max_images + 1)
    per_class: dict[str, list[np.ndarray]] = {}
    for seq in data:
        tgt = seq.target
        n_tok = sum(1 for el in tgt if not is_image(el))
        length_hist[min(n_tok, max_len)] += 1
        for el in tgt:
            if not is_image(el):
                token_counts[el] += 1
        imgs = [el for el in tgt if is_image(el)]
        image_hist[min(len(imgs), max_images)] += 1
        key = json.dumps([el for el in seq.prompt if not is_image(el)])
        per_class.setdefault(key, []).extend(el.values for el in imgs)
    moments = {}
    for key, vals in per_class.items():
        if not vals:
            continue
        arr = np.array(vals)
        moments[key] = {"n": len(vals), "mean": arr.mean(axis=0).tolist(), "var": arr.var(axis=0).tolist()}
    return {
        "records": len(data),
        "length_hist": length_hist,
        "token_counts": token_counts,
        "image_count_hist": image_hist,
        "class_moments": moments,
    }
