"""Mixed-modal sequences: discrete tokens interleaved with continuous image blocks.

Tokens are plain ints in ``[0, M)``. An image is a single :class:`ImageBlock`
element; the ``<|image|>`` id ``M`` only ever appears in head distributions
and in corruption bags, never as a materialized token.

Gaps are numbered ``0..n`` for a length-``n`` sequence, gap ``i`` sitting
immediately before element ``i``. Gaps below ``prompt_len`` lie inside (or in
front of) the conditioning prompt and are never edited.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from eflab.errors import CapacityError, DataError
from eflab.schedule import ExtendedTime


@dataclass(frozen=True)
class Vocabulary:
    size: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 1:
            raise DataError("vocabulary needs at least one ordinary token")
        if self.names is not None and len(self.names) != self.size:
            raise DataError(f"expected {self.size} token names, got {len(self.names)}")

    @property
    def image_token_id(self) -> int:
        return self.size

    @property
    def head_size(self) -> int:
        """Width of a bag distribution: ordinary tokens plus the image token."""
        return self.size + 1

    def name(self, token: int) -> str:
        if token == self.image_token_id:
            return "<|image|>"
        return self.names[token] if self.names else str(token)

    @classmethod
    def from_names_file(cls, path: str | Path) -> Vocabulary:
        names = tuple(Path(path).read_text().splitlines())
        return cls(len(names), names)


class ImageBlock:
    """A continuous block standing in for an image latent, with its own clock."""

    __slots__ = ("values", "time")

    def __init__(self, values, time: ExtendedTime | float = 1.0):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        self.values = arr
        self.time = time if isinstance(time, ExtendedTime) else ExtendedTime(float(time))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def t(self) -> float:
        return self.time.clipped

    def with_state(self, values, tau: float) -> ImageBlock:
        return ImageBlock(values, ExtendedTime(tau))

    def __eq__(self, other):
        if not isinstance(other, ImageBlock):
            return NotImplemented
        return self.time == other.time and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.values.tobytes(), self.time))

    def __repr__(self):
        return f"ImageBlock(dim={self.dim}, tau={self.time.tau:.4g})"


Element = Union[int, ImageBlock]


def is_image(el: Element) -> bool:
    return isinstance(el, ImageBlock)


@dataclass(frozen=True)
class MixedSequence:
    elements: tuple = ()
    prompt_len: int = 0
    max_len: int | None = None

    def __post_init__(self):
        els = tuple(self.elements)
        object.__setattr__(self, "elements", els)
        if not 0 <= self.prompt_len <= len(els):
            raise DataError(f"prompt_len {self.prompt_len} outside [0, {len(els)}]")
        if self.max_len is not None and len(els) > self.max_len:
            raise CapacityError(f"sequence of length {len(els)} exceeds maximum {self.max_len}")
        for el in els:
            if not (is_image(el) or (isinstance(el, (int, np.integer)) and el >= 0)):
                raise DataError(f"invalid sequence element {el!r}")

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    @property
    def prompt(self) -> tuple:
        return self.elements[: self.prompt_len]

    @property
    def target(self) -> tuple:
        return self.elements[self.prompt_len :]

    @property
    def n_gaps(self) -> int:
        return len(self.elements) + 1

    def active_gaps(self) -> range:
        """Gaps where insertions may happen: at or after the end of the prompt."""
        return range(self.prompt_len, len(self.elements) + 1)

    def image_indices(self) -> list[int]:
        return [i for i, el in enumerate(self.elements) if is_image(el)]

    def images(self) -> list[ImageBlock]:
        return [el for el in self.elements if is_image(el)]

    def symbols(self, image_token_id: int) -> tuple[int, ...]:
        """Discrete skeleton: images collapsed to ``image_token_id``."""
        return tuple(image_token_id if is_image(el) else int(el) for el in self.elements)

    def replace(self, elements: Iterable[Element], prompt_len: int | None = None) -> MixedSequence:
        return MixedSequence(
            tuple(elements),
            self.prompt_len if prompt_len is None else prompt_len,
            self.max_len,
        )

    def without_prompt(self) -> MixedSequence:
        return MixedSequence(self.target, 0, self.max_len)

    def validate(self, vocab: Vocabulary, n_img: int | None = None) -> None:
        for el in self.elements:
            if is_image(el):
                if n_img is not None and el.dim != n_img:
                    raise DataError(f"image block has dimension {el.dim}, expected {n_img}")
            elif el >= vocab.size:
                raise DataError(f"token id {el} outside vocabulary of size {vocab.size}")


def insert(
    seq: MixedSequence,
    i: int,
    a: int,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
    n_img: int | None = None,
) -> MixedSequence:
    """Insert token ``a`` at gap ``i``; the image token becomes a fresh noise block at t=0."""
    n = len(seq)
    if not 0 <= i <= n:
        raise IndexError(f"gap {i} outside [0, {n}]")
    if i < seq.prompt_len:
        raise IndexError(f"gap {i} lies inside the prompt (prompt_len={seq.prompt_len})")
    if seq.max_len is not None and n + 1 > seq.max_len:
        raise CapacityError(f"insertion would exceed maximum length {seq.max_len}")
    if a == vocab.image_token_id:
        if rng is None or n_img is None:
            raise ValueError("inserting an image needs an rng and the image dimension")
        el: Element = ImageBlock(rng.standard_normal(n_img), ExtendedTime(0.0))
    elif 0 <= a < vocab.size:
        el = int(a)
    else:
        raise DataError(f"token id {a} outside vocabulary")
    return seq.replace(seq.elements[:i] + (el,) + seq.elements[i:])


def token_histogram(seqs: Iterable[MixedSequence], image_token_id: int) -> dict[int, int]:
    counts: Counter = Counter()
    for seq in seqs:
        counts.update(seq.symbols(image_token_id))
    return dict(counts)


# --- line-oriented dataset format -------------------------------------------


def _element_to_json(el: Element):
    if is_image(el):
        out = {"img": el.values.tolist()}
        if el.time.tau != 1.0:
            out["tau"] = el.time.tau
        return out
    return int(el)


def _element_from_json(obj) -> Element:
    if isinstance(obj, dict):
        extra = set(obj) - {"img", "tau"}
        if "img" not in obj or extra:
            raise DataError(f"malformed image element {obj!r}")
        return ImageBlock(obj["img"], ExtendedTime(float(obj.get("tau", 1.0))))
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise DataError(f"malformed token {obj!r}")
    return obj


def to_record(seq: MixedSequence) -> dict:
    return {
        "prompt": [_element_to_json(el) for el in seq.prompt],
        "target": [_element_to_json(el) for el in seq.target],
    }


def from_record(obj: dict, max_len: int | None = None) -> MixedSequence:
    if not isinstance(obj, dict) or "target" not in obj:
        raise DataError(f"dataset record needs a 'target' list: {obj!r}")
    unknown = set(obj) - {"prompt", "target", "weight"}
    if unknown:
        raise DataError(f"unknown record keys {sorted(unknown)}")
    prompt = [_element_from_json(x) for x in obj.get("prompt", [])]
    target = [_element_from_json(x) for x in obj["target"]]
    return MixedSequence(tuple(prompt + target), len(prompt), max_len)


def dumps(seq: MixedSequence) -> str:
    return json.dumps(to_record(seq))


def loads(line: str, max_len: int | None = None) -> MixedSequence:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"unparseable dataset line: {exc}") from exc
    return from_record(obj, max_len)


def write_dataset(path: str | Path, seqs: Sequence[MixedSequence]) -> None:
    with open(path, "w") as fh:
        for seq in seqs:
            fh.write(dumps(seq) + "\n")


def read_dataset(path: str | Path, max_len: int | None = None) -> list[MixedSequence]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(loads(line, max_len))
    return out


def read_weighted_dataset(path: str | Path) -> list[tuple[MixedSequence, float]]:
    """Records may carry an optional ``weight``; weights are normalized to sum to one."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            rows.append((from_record(obj), float(obj.get("weight", 1.0))))
    if not rows:
        raise DataError(f"empty dataset {path}")
    total = sum(w for _, w in rows)
    return [(s, w / total) for s, w in rows]
